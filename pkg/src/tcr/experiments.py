"""Synthetic end-to-end runs shared by the acceptance suite and ``scripts/``.

Every run is a pure function of its arguments: it seeds torch, pins one
thread, and returns the checkpoint bytes and a JSON-ready report so that
repeated runs can be compared byte for byte.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .checkpoint import state_to_bytes
from .data import DatasetManifest, SynthSpec, synth_dataset
from .decoding import AttentionPolicy, greedy_decode
from .metrics import evaluate_titles
from .model import ModelConfig, TitleCoverGenerator
from .refinement import RefinementConfig, RefinementResult, refine_loop
from .tokenization import Vocab, build_vocab
from .training import TrainSchedule, decode_titles, seed_everything, train


def split_seed(seed: int, split: int) -> int:
    """Independent seed for split ``split`` (0 train, 1 valid, 2 test)."""
    return int(np.random.SeedSequence([seed, split]).generate_state(1)[0])


def corpus_vocab(manifest: DatasetManifest, size: int) -> Vocab:
    return build_vocab([s.text for s in manifest] + [s.title for s in manifest], size)


@dataclass
class RunOutput:
    name: str
    metrics: dict
    checkpoint: bytes = field(repr=False)
    log: list[dict] = field(default_factory=list, repr=False)
    seconds: float = 0.0

    def report_bytes(self) -> bytes:
        """Canonical report: metrics plus the full training log (no timings)."""
        return json.dumps({"name": self.name, "metrics": self.metrics, "log": self.log}, sort_keys=True).encode("utf-8")


@dataclass(frozen=True)
class CopyPrefixSetup:
    n_train: int = 200
    n_valid: int = 50
    k: int = 5
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    vocab_size: int = 64
    seed: int = 0


def copy_prefix_run(setup: CopyPrefixSetup = CopyPrefixSetup()) -> RunOutput:
    """Train the tiny model on copy-prefix data; score validation titles greedily."""
    t = time.perf_counter()
    seed_everything(setup.seed)
    spec = SynthSpec("copy-prefix", k=setup.k)
    tr = synth_dataset(split_seed(setup.seed, 0), replace(spec, n_samples=setup.n_train, id_prefix="train-"))
    va = synth_dataset(split_seed(setup.seed, 1), replace(spec, n_samples=setup.n_valid, id_prefix="valid-"))
    vocab = corpus_vocab(tr, setup.vocab_size)
    cfg = ModelConfig.tiny(len(vocab))
    sched = TrainSchedule(epochs=setup.epochs, batch_size=setup.batch_size, lr=setup.lr, seed=setup.seed)
    res = train(tr, vocab, cfg, sched, valid=va)
    report = evaluate_titles(decode_titles(res.model, va, vocab, "greedy"), va, vocab)
    metrics = {"r1": report.r1, "r2": report.r2, "rl": report.rl, "best_epoch": res.best_epoch, "setup": asdict(setup)}
    return RunOutput("copy-prefix", metrics, state_to_bytes(cfg, res.model.state_dict()), res.log, time.perf_counter() - t)


@dataclass(frozen=True)
class PlantedCoverSetup:
    n_train: int = 800
    n_valid: int = 50
    n_test: int = 50
    L: int = 25
    k: int = 3
    marker_scale: float = 3.0
    max_title: int = 6
    epochs: int = 150
    batch_size: int = 16
    lr: float = 1e-3
    vocab_size: int = 64
    layer: int | None = -1
    heads: str = "mean"
    seed: int = 0


def planted_cover_run(setup: PlantedCoverSetup = PlantedCoverSetup()) -> RunOutput:
    """Train on planted-cover data and measure how often the selected cover is the planted frame."""
    t = time.perf_counter()
    seed_everything(setup.seed)
    spec = SynthSpec(
        "planted-cover", k=setup.k, L=setup.L, marker_scale=setup.marker_scale, sentences=(2, 2), sentence_len=(3, 5)
    )
    tr = synth_dataset(split_seed(setup.seed, 0), replace(spec, n_samples=setup.n_train, id_prefix="train-"))
    va = synth_dataset(split_seed(setup.seed, 1), replace(spec, n_samples=setup.n_valid, id_prefix="valid-"))
    te = synth_dataset(split_seed(setup.seed, 2), replace(spec, n_samples=setup.n_test, id_prefix="test-"))
    vocab = corpus_vocab(tr, setup.vocab_size)
    cfg = ModelConfig.tiny(len(vocab), max_title=setup.max_title)
    sched = TrainSchedule(epochs=setup.epochs, batch_size=setup.batch_size, lr=setup.lr, seed=setup.seed)
    res = train(tr, vocab, cfg, sched, valid=va)
    policy = AttentionPolicy(setup.layer, setup.heads)
    covers = {}
    for s in te:
        covers[s.id] = greedy_decode(res.model, s, vocab, policy).cover_index
    hits = sum(covers[s.id] == s.cover_index for s in te)
    metrics = {
        "cover_accuracy": hits / len(te),
        "hits": hits,
        "n_test": len(te),
        "covers": covers,
        "best_epoch": res.best_epoch,
        "setup": asdict(setup),
    }
    return RunOutput("planted-cover", metrics, state_to_bytes(cfg, res.model.state_dict()), res.log, time.perf_counter() - t)


@dataclass(frozen=True)
class CorruptedRefineSetup:
    n_train: int = 200
    n_valid: int = 50
    corrupt_fraction: float = 0.2
    k: int = 5
    epochs: int = 150
    batch_size: int = 16
    lr: float = 1e-3
    u: int = 3
    v: int = 3
    keep: float = 0.8
    beam: int = 5
    vocab_size: int = 64
    seed: int = 0


@dataclass
class RefineOutput:
    result: RefinementResult
    corrupted_ids: list[str]
    recall: float  # fraction of corrupted ids that were dropped
    seconds: float


def corrupted_refine_run(setup: CorruptedRefineSetup = CorruptedRefineSetup()) -> RefineOutput:
    """One refinement iteration on copy-prefix data with label-corrupted samples."""
    t = time.perf_counter()
    seed_everything(setup.seed)
    spec = SynthSpec("copy-prefix", k=setup.k)
    tr = synth_dataset(
        split_seed(setup.seed, 0),
        replace(spec, n_samples=setup.n_train, id_prefix="train-", corrupt_fraction=setup.corrupt_fraction),
    )
    va = synth_dataset(split_seed(setup.seed, 1), replace(spec, n_samples=setup.n_valid, id_prefix="valid-"))
    vocab = corpus_vocab(tr, setup.vocab_size)
    cfg = ModelConfig.tiny(len(vocab))
    sched = TrainSchedule(epochs=setup.epochs, batch_size=setup.batch_size, lr=setup.lr, seed=setup.seed)
    rc = RefinementConfig(u=setup.u, v=setup.v, keep=setup.keep, iterations=1, beam=setup.beam)
    res = refine_loop(tr, vocab, cfg, rc, sched, valid=va)
    bad = tr.info["corrupted_ids"]
    dropped = set(res.reports[0].dropped_ids)
    recall = sum(i in dropped for i in bad) / len(bad) if bad else 1.0
    return RefineOutput(res, bad, recall, time.perf_counter() - t)


def model_bytes(model: TitleCoverGenerator) -> bytes:
    return state_to_bytes(model.config, model.state_dict())
