import math

import numpy as np
import pytest
import torch

from support import random_model, random_sample, tiny_vocab
from tcr.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from tcr.data import DatasetManifest, SynthSpec, synth_dataset
from tcr.model import ModelConfig
from tcr.tokenization import build_vocab
from tcr.training import (
    TrainingDiverged,
    TrainSchedule,
    grad_check,
    lr_at,
    make_batch,
    model_grad_check,
    param_groups,
    relative_error,
    sample_rng,
    train,
    warmup_steps,
)

VOCAB = tiny_vocab()
CFG = ModelConfig.tiny(len(VOCAB))


def _copy_data(n, seed, prefix=""):
    return synth_dataset(seed, SynthSpec(n_samples=n, id_prefix=prefix))


def test_lr_schedule():
    total, peak = 100, 1e-3
    assert warmup_steps(total, 0.1) == 10
    assert lr_at(0, total, peak, 0.1) == 0.0
    assert lr_at(5, total, peak, 0.1) == pytest.approx(peak / 2)
    assert lr_at(10, total, peak, 0.1) == peak
    assert lr_at(55, total, peak, 0.1) == pytest.approx(peak / 2)
    assert lr_at(100, total, peak, 0.1) == 0.0
    lrs = [lr_at(s, total, peak, 0.1) for s in range(total)]
    assert max(lrs) == peak and lrs.index(peak) == 10
    assert lr_at(0, total, peak, 0.0) == peak


def test_sample_rng_varies_by_epoch_and_repeats():
    s = random_sample(np.random.default_rng(0), VOCAB, 2, 3, 2, sid="abc")
    a = sample_rng(0, 1, s).integers(1 << 30, size=4)
    assert np.array_equal(a, sample_rng(0, 1, s).integers(1 << 30, size=4))
    assert not np.array_equal(a, sample_rng(0, 2, s).integers(1 << 30, size=4))


def test_param_groups_decay_only_matrices():
    model = random_model(0, CFG)
    decay, no_decay = param_groups(model, 0.01)
    assert decay["weight_decay"] == 0.01 and no_decay["weight_decay"] == 0.0
    assert all(p.dim() >= 2 for p in decay["params"]) and all(p.dim() < 2 for p in no_decay["params"])
    assert len(decay["params"]) + len(no_decay["params"]) == len(list(model.parameters()))


def test_grad_check_linear_toy():
    torch.manual_seed(0)
    w = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    b = torch.randn(3, dtype=torch.float64, requires_grad=True)
    x = torch.randn(5, 4, dtype=torch.float64)
    c = torch.randn(5, 3, dtype=torch.float64)
    rep = grad_check(lambda: ((x @ w.T + b) * c).sum(), {"w": w, "b": b}, n_coords=30)
    assert rep.max_rel_error < 1e-8 and rep.n_coords == 30


def test_grad_check_tiny_model_small():
    rng = np.random.default_rng(0)
    samples = [random_sample(rng, VOCAB, 3, 5, 6, sid=str(i)) for i in range(2)]
    model = random_model(0, CFG, init_std=0.1)
    rep = model_grad_check(model, samples, VOCAB, n_coords=40)
    assert rep.passed(1e-3), rep.worst


def test_grad_check_flags_dropout():
    rng = np.random.default_rng(1)
    samples = [random_sample(rng, VOCAB, 3, 5, 6, sid=str(i)) for i in range(2)]
    model = random_model(0, ModelConfig.tiny(len(VOCAB), dropout=0.5), init_std=0.1)
    rep = model_grad_check(model, samples, VOCAB, n_coords=20, train_mode=True)
    assert not rep.passed(1e-3)


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)
    assert relative_error(0.0, 2e-12) == pytest.approx(2e-5)
    assert relative_error(1e-3, 2e-3) == pytest.approx(0.5)


def test_make_batch_masks_deterministically():
    data = _copy_data(5, 0)
    vocab = build_vocab([s.text for s in data], 64)
    cfg = ModelConfig.tiny(len(vocab))
    a = make_batch(list(data), vocab, cfg, seed=3, epoch=0)
    b = make_batch(list(data), vocab, cfg, seed=3, epoch=0)
    assert torch.equal(a.ids, b.ids) and torch.equal(a.masked_index, b.masked_index)


@pytest.fixture(scope="module")
def short_run():
    train_m = _copy_data(40, 1, "tr-")
    valid_m = _copy_data(10, 2, "va-")
    vocab = build_vocab([s.text for s in train_m] + [s.title for s in train_m], 64)
    cfg = ModelConfig.tiny(len(vocab))
    sched = TrainSchedule(epochs=3, batch_size=16, lr=1e-3)
    return train_m, valid_m, vocab, cfg, sched


def test_train_bookkeeping_and_determinism(short_run, tmp_path):
    train_m, valid_m, vocab, cfg, sched = short_run
    r1 = train(train_m, vocab, cfg, sched, valid=valid_m, log_path=tmp_path / "a.jsonl")
    r2 = train(train_m, vocab, cfg, sched, valid=valid_m, log_path=tmp_path / "b.jsonl")
    steps_per_epoch = math.ceil(40 / 16)
    assert r1.steps == 3 * steps_per_epoch
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert len(lines) == r1.steps + sched.epochs
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for k, v in r1.model.state_dict().items():
        assert torch.equal(v, r2.model.state_dict()[k])
    epochs = [r for r in r1.log if "val_loss" in r]
    assert len(epochs) == 3 and all(set(r["val_rouge"]) == {"r1", "r2", "rl", "mean"} for r in epochs)
    best = max(range(3), key=lambda e: (epochs[e]["val_rouge"]["mean"], -e))
    assert r1.best_epoch == best
    assert not r1.model.training


def test_one_epoch_one_batch():
    data = _copy_data(10, 3)
    vocab = build_vocab([s.text for s in data], 64)
    res = train(data, vocab, ModelConfig.tiny(len(vocab)), TrainSchedule(epochs=1, lr=1e-3))
    assert res.steps == 1 and [r["step"] for r in res.log if r["val_rouge"] is None][:1] == [0]


def test_validation_loss_decreases_early():
    train_m = _copy_data(200, 11, "tr-")
    valid_m = _copy_data(50, 12, "va-")
    vocab = build_vocab([s.text for s in train_m] + [s.title for s in train_m], 64)
    res = train(train_m, vocab, ModelConfig.tiny(len(vocab)), TrainSchedule(epochs=3, lr=1e-3), valid=valid_m)
    val = [r["val_loss"] for r in res.log if "val_loss" in r]
    assert val[0] > val[1] > val[2]


def test_divergence_aborts_with_last_good_state():
    data = _copy_data(20, 4)
    vocab = build_vocab([s.text for s in data], 64)
    with pytest.raises(TrainingDiverged) as info:
        train(data, vocab, ModelConfig.tiny(len(vocab)), TrainSchedule(epochs=2, lr=1e12, warmup_fraction=0.0))
    state = info.value.result.model.state_dict()
    assert all(torch.isfinite(v).all() for v in state.values())


def test_train_rejects_bad_inputs():
    with pytest.raises(ValueError):
        train(DatasetManifest([]), VOCAB, CFG)
    data = _copy_data(3, 0)
    with pytest.raises(ValueError, match="vocab_size"):
        train(data, VOCAB, ModelConfig.tiny(10))


def test_checkpoint_round_trip(tmp_path):
    model = random_model(0, CFG, init_std=0.1)
    save_checkpoint(tmp_path / "c.bin", model)
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:4] == b"TCRC" and int.from_bytes(raw[4:8], "little") == 1
    back = load_checkpoint(tmp_path / "c.bin", expected=CFG)
    for k, v in model.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
    save_checkpoint(tmp_path / "d.bin", back)
    assert (tmp_path / "d.bin").read_bytes() == raw
    with pytest.raises(CheckpointError, match="'layers'"):
        load_checkpoint(tmp_path / "c.bin", expected=ModelConfig.tiny(len(VOCAB), layers=3))
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(tmp_path / "x.bin")
    (tmp_path / "m.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        read_checkpoint(tmp_path / "m.bin")
