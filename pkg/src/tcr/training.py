"""Masked-title training with AdamW and linear warmup/decay, plus gradient checking."""
from __future__ import annotations

import copy
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import DatasetManifest, Sample
from .decoding import AttentionPolicy, greedy_decode, beam_decode
from .metrics import evaluate_titles
from .model import (
    Batch,
    ModelConfig,
    NumericalDivergence,
    TitleCoverGenerator,
    batch_from_samples,
    training_loss,
)
from .tokenization import Vocab, decode

log = logging.getLogger(__name__)

VALID_EPOCH = 0xFFFF  # fixed mask draw for validation loss


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-5
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: float | None = None
    seed: int = 0
    val_decode: str = "greedy"  # or "beam"
    val_beam: int = 5
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.val_decode not in ("greedy", "beam"):
            raise ValueError(f"unknown validation decode mode {self.val_decode!r}")


def warmup_steps(total: int, fraction: float) -> int:
    return int(fraction * total)


def lr_at(step: int, total: int, peak: float, fraction: float) -> float:
    """Linear warmup to ``peak`` over the first ``fraction`` of steps, then linear decay to 0."""
    w = warmup_steps(total, fraction)
    if step < w:
        return peak * step / w
    return peak * max(0.0, (total - step) / max(1, total - w))


def seed_everything(seed: int, threads: int | None = 1) -> None:
    if threads is not None:
        torch.set_num_threads(threads)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def sample_rng(seed: int, epoch: int, sample: Sample) -> np.random.Generator:
    """Per-sample masking RNG: differs across epochs, reproducible across runs."""
    return np.random.default_rng([seed, epoch, zlib.crc32(sample.id.encode("utf-8"))])


def make_batch(samples: Sequence[Sample], vocab: Vocab, config: ModelConfig, seed: int, epoch: int, dtype=torch.float32) -> Batch:
    rngs = [sample_rng(seed, epoch, s) for s in samples]
    return batch_from_samples(list(samples), vocab, config, "train", rngs=rngs, dtype=dtype)


def param_groups(model: TitleCoverGenerator, weight_decay: float) -> list[dict]:
    decay, no_decay = [], []
    for p in model.parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


@torch.no_grad()
def masked_loss(model: TitleCoverGenerator, manifest: DatasetManifest, vocab: Vocab, seed: int, batch_size: int = 64) -> float:
    """Eval-mode masked-title loss with a fixed mask draw."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    samples = list(manifest)
    for i in range(0, len(samples), batch_size):
        batch = make_batch(samples[i : i + batch_size], vocab, model.config, seed, VALID_EPOCH)
        logits, _ = model(batch)
        n = len(batch.targets)
        total += float(training_loss(logits, batch.targets)) * n
        count += n
    model.train(was)
    return total / max(count, 1)


def decode_titles(
    model: TitleCoverGenerator,
    manifest: DatasetManifest,
    vocab: Vocab,
    mode: str = "greedy",
    beam: int = 5,
    policy: AttentionPolicy = AttentionPolicy(),
) -> dict[str, str]:
    out = {}
    for s in manifest:
        if mode == "greedy":
            r = greedy_decode(model, s, vocab, policy)
        else:
            r = beam_decode(model, s, vocab, beam, policy)
        out[s.id] = decode(vocab, r.tokens)
    return out


@dataclass
class TrainResult:
    model: TitleCoverGenerator
    log: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    steps: int = 0


class TrainingDiverged(NumericalDivergence):
    def __init__(self, msg: str, result: TrainResult):
        super().__init__(msg)
        self.result = result


def train(
    manifest: DatasetManifest,
    vocab: Vocab,
    config: ModelConfig,
    schedule: TrainSchedule = TrainSchedule(),
    valid: DatasetManifest | None = None,
    log_path: str | Path | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from a fresh initialization and return the best-validation parameters.

    Without a validation manifest the final epoch's parameters are returned.
    """
    if len(manifest) == 0:
        raise ValueError("empty training manifest")
    if config.vocab_size != len(vocab):
        raise ValueError(f"config vocab_size {config.vocab_size} != vocab size {len(vocab)}")
    seed_everything(schedule.seed, threads=None)
    model = TitleCoverGenerator(config)
    model.train()
    opt = torch.optim.AdamW(
        param_groups(model, schedule.weight_decay), lr=schedule.lr, betas=schedule.betas, eps=schedule.eps
    )
    samples = list(manifest)
    per_epoch = math.ceil(len(samples) / schedule.batch_size)
    total = per_epoch * schedule.epochs
    order_rng = np.random.default_rng([schedule.seed, 0xBA7C])
    records: list[dict] = []
    result = TrainResult(model, records)
    best_score = -math.inf
    best_state = copy.deepcopy(model.state_dict())
    good_state = best_state
    logf = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(rec: dict) -> None:
        records.append(rec)
        if logf:
            logf.write(json.dumps(rec, sort_keys=True) + "\n")
            logf.flush()

    step = 0
    try:
        for epoch in range(schedule.epochs):
            order = order_rng.permutation(len(samples)) if schedule.shuffle else np.arange(len(samples))
            epoch_loss = 0.0
            for b in range(per_epoch):
                chunk = [samples[i] for i in order[b * schedule.batch_size : (b + 1) * schedule.batch_size]]
                batch = make_batch(chunk, vocab, config, schedule.seed, epoch)
                lr = lr_at(step, total, schedule.lr, schedule.warmup_fraction)
                for g in opt.param_groups:
                    g["lr"] = lr
                logits, _ = model(batch)
                loss = training_loss(logits, batch.targets)
                if not torch.isfinite(loss):
                    raise NumericalDivergence(f"non-finite loss at step {step}")
                opt.zero_grad()
                loss.backward()
                if schedule.max_grad_norm:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), schedule.max_grad_norm)
                opt.step()
                good_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                loss_value = loss.item()
                epoch_loss += loss_value
                emit({"epoch": epoch, "step": step, "loss": loss_value, "lr": lr, "val_rouge": None})
                step += 1
            rec = {"epoch": epoch, "step": step, "loss": epoch_loss / per_epoch, "lr": lr_at(step, total, schedule.lr, schedule.warmup_fraction), "val_rouge": None}
            if valid is not None and len(valid):
                model.eval()
                rec["val_loss"] = masked_loss(model, valid, vocab, schedule.seed)
                titles = decode_titles(model, valid, vocab, schedule.val_decode, schedule.val_beam)
                report = evaluate_titles(titles, valid, vocab)
                rec["val_rouge"] = {"r1": report.r1, "r2": report.r2, "rl": report.rl, "mean": report.mean}
                model.train()
                if report.mean > best_score:
                    best_score = report.mean
                    result.best_epoch = epoch
                    best_state = copy.deepcopy(model.state_dict())
            else:
                result.best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
            emit(rec)
            if on_epoch:
                on_epoch(rec)
            log.info("epoch %d loss %.4f val %s", epoch, rec["loss"], rec["val_rouge"])
    except NumericalDivergence as e:
        model.load_state_dict(good_state)
        model.eval()
        result.steps = step
        raise TrainingDiverged(str(e), result) from e
    finally:
        if logf:
            logf.close()
    model.load_state_dict(best_state)
    model.eval()
    result.steps = step
    return result


GRAD_FLOOR = 1e-7  # central differences at h=1e-4 in float64 carry ~1e-12 of rounding noise


def relative_error(a: float, b: float, floor: float = GRAD_FLOOR) -> float:
    """|a - b| relative to the larger magnitude, which is floored.

    Without the floor, coordinates whose true gradient is exactly zero (key
    biases, for one: softmax ignores a constant shift of a row) would report
    rounding noise as a large relative error.
    """
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    worst: tuple[str, tuple[int, ...]] | None
    errors: list[float]

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: dict[str, torch.Tensor],
    n_coords: int = 200,
    eps: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients with central differences on random coordinates.

    Coordinates are spread evenly over the given tensors. ``loss_fn`` must be
    deterministic; anything stochastic (dropout) shows up as large errors.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: p.grad.detach().clone() for k, p in params.items()}
    rng = np.random.default_rng(seed)
    names = list(params)
    coords = []
    for i in range(n_coords):
        name = names[i % len(names)]
        flat = int(rng.integers(params[name].numel()))
        coords.append((name, flat))
    errors = []
    worst, worst_err = None, -1.0
    with torch.no_grad():
        for name, flat in coords:
            p = params[name]
            view = p.view(-1)
            old = view[flat].item()
            view[flat] = old + eps
            up = float(loss_fn())
            view[flat] = old - eps
            down = float(loss_fn())
            view[flat] = old
            numeric = (up - down) / (2 * eps)
            err = relative_error(float(analytic[name].view(-1)[flat]), numeric)
            errors.append(err)
            if err > worst_err:
                worst_err = err
                worst = (name, tuple(np.unravel_index(flat, tuple(p.shape))))
    return GradCheckReport(max(errors), len(errors), worst, errors)


def model_grad_check(
    model: TitleCoverGenerator,
    samples: Sequence[Sample],
    vocab: Vocab,
    n_coords: int = 200,
    eps: float = 1e-4,
    seed: int = 0,
    train_mode: bool = False,
) -> GradCheckReport:
    """Gradient check of the masked-title loss on a float64 copy of ``model``.

    ``train_mode=True`` leaves dropout active, which a correct check must flag.
    """
    m = copy.deepcopy(model).double()
    m.train(train_mode)
    batch = make_batch(samples, vocab, m.config, seed, 0, dtype=torch.float64)

    def loss_fn() -> torch.Tensor:
        logits, _ = m(batch)
        return training_loss(logits, batch.targets)

    params = dict(m.named_parameters())
    return grad_check(loss_fn, params, n_coords, eps, seed)


def write_log(records: list[dict], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
