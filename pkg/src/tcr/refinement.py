"""Attention-based refinement of the training data.

Token level: each generated title token votes for the sentence holding its
most-attended text position; frames collect per-token attention shares. The
top-u sentences and top-v frames are kept. Sample level: samples whose
generated title scores low Rouge-L against the gold title are dropped.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest, Sample, write_manifest
from .decoding import AttentionPolicy, GenerationResult, beam_decode, greedy_decode
from .metrics import evaluate_titles, rouge_l
from .model import ModelConfig, TitleCoverGenerator
from .tokenization import SentenceSpan, Vocab, decode, encode, segment_sentences, split_sentences
from .training import TrainSchedule, decode_titles, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RefinementConfig:
    u: int = 3
    v: int = 3
    keep: float = 0.8
    iterations: int = 1
    beam: int = 5

    def __post_init__(self):
        if self.u < 1 or self.v < 1 or self.iterations < 1 or self.beam < 1:
            raise ValueError("u, v, iterations and beam must be at least 1")
        if not 0 < self.keep <= 1:
            raise ValueError("keep fraction must lie in (0, 1]")


@dataclass
class CrossAttentionMatrix:
    matrix: np.ndarray  # (generated tokens, source positions)
    frame_span: tuple[int, int]
    text_span: tuple[int, int]
    policy: str = ""


def cross_attention(result: GenerationResult, policy: AttentionPolicy | None = None) -> CrossAttentionMatrix:
    if not result.step_attention:
        raise ValueError("no tokens to attend")
    desc = "" if policy is None else f"layer={policy.layer},heads={policy.heads}"
    return CrossAttentionMatrix(np.stack(result.step_attention), result.frame_span, result.text_span, desc)


def select_sentences(attn: CrossAttentionMatrix, spans: Sequence[SentenceSpan], u: int) -> list[int]:
    """Top-``u`` sentences by vote count, returned in text order.

    ``spans`` index text tokens from 0; positions past the (possibly truncated)
    text region simply receive no votes.
    """
    a, e = attn.text_span
    if e <= a or not spans:
        return []
    text = attn.matrix[:, a:e]
    owner = np.full(e - a, -1)
    for k, sp in enumerate(spans):
        owner[sp.start : min(sp.end, e - a)] = k
    votes = np.zeros(len(spans), dtype=int)
    for row in text:
        k = owner[int(np.argmax(row))]
        if k >= 0:
            votes[k] += 1
    ranked = sorted(range(len(spans)), key=lambda k: (-votes[k], k))
    return sorted(spans[k].index for k in ranked[:u])


def frame_weights(attn: CrossAttentionMatrix) -> np.ndarray:
    """Per-frame sum over generated tokens of that token's share of frame attention."""
    a, e = attn.frame_span
    fr = np.asarray(attn.matrix[:, a:e], dtype=np.float64)
    tot = fr.sum(axis=1, keepdims=True)
    shares = np.divide(fr, tot, out=np.zeros_like(fr), where=tot > 0)
    return shares.sum(axis=0)


def select_frames(weights: np.ndarray, v: int) -> list[int]:
    if v < 1:
        raise ValueError("v must be at least 1")
    ranked = sorted(range(len(weights)), key=lambda i: (-weights[i], i))
    return sorted(ranked[:v])


def score_sample(generated: Sequence[int], gold: Sequence[int]) -> float:
    return rouge_l(generated, gold).f1


def filter_samples(scores: dict[str, float], keep: float) -> tuple[list[str], list[str]]:
    """Keep the top ``keep`` fraction by score; ties at the cut are kept."""
    if not scores:
        return [], []
    n_keep = max(1, math.ceil(keep * len(scores) - 1e-9))
    cut = sorted(scores.values(), reverse=True)[n_keep - 1]
    kept = [i for i, s in scores.items() if s >= cut]
    dropped = [i for i, s in scores.items() if s < cut]
    return kept, dropped


def rebuild_sample(sample: Sample, sentences: Sequence[int], frames: Sequence[int]) -> Sample:
    """Sample restricted to the chosen sentences and frames, both in original order."""
    all_sents = split_sentences(sample.text)
    sentences = sorted(set(sentences))
    frames = sorted(set(frames))
    if sentences == list(range(len(all_sents))):
        asr, ocr = sample.asr, sample.ocr
    else:
        asr, ocr = " ".join(all_sents[i] for i in sentences), ""
    if frames == list(range(sample.n_frames)):
        fr, cover = sample.frames, sample.cover_index
    else:
        if not frames:
            raise ValueError(f"sample {sample.id}: at least one frame must be kept")
        fr = sample.frames[frames]
        cover = frames.index(sample.cover_index) if sample.cover_index in frames else None
    return Sample(sample.id, asr, ocr, sample.title, fr, cover)


@dataclass
class SampleReport:
    id: str
    rouge_l: float
    sentences: list[int]
    frames: list[int]
    title: str


@dataclass
class IterationReport:
    iteration: int
    n_before: int
    n_after: int
    kept_ids: list[str]
    dropped_ids: list[str]
    per_sample: list[SampleReport]
    val_scores: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RefinementResult:
    model: TitleCoverGenerator
    best_iteration: int
    reports: list[IterationReport] = field(default_factory=list)
    datasets: list[DatasetManifest] = field(default_factory=list)  # refined training data after each iteration
    models: list[TitleCoverGenerator] = field(default_factory=list)


class EmptyRefinement(RuntimeError):
    def __init__(self, msg: str, reports: list[IterationReport]):
        super().__init__(msg)
        self.reports = reports


def refine_sample(
    model: TitleCoverGenerator,
    sample: Sample,
    vocab: Vocab,
    rcfg: RefinementConfig,
    policy: AttentionPolicy = AttentionPolicy(),
) -> tuple[Sample, SampleReport]:
    res = beam_decode(model, sample, vocab, rcfg.beam, policy) if rcfg.beam > 1 else greedy_decode(model, sample, vocab, policy)
    gold = encode(vocab, sample.title)
    score = score_sample(res.tokens, gold)
    if res.tokens:
        attn = cross_attention(res, policy)
    else:
        # nothing generated: the [CLS] row stands in, as for cover selection
        attn = CrossAttentionMatrix(res.cls_attention[None, :], res.frame_span, res.text_span)
    sents = select_sentences(attn, segment_sentences(vocab, sample.text), rcfg.u)
    frames = select_frames(frame_weights(attn), rcfg.v)
    refined = rebuild_sample(sample, sents, frames)
    return refined, SampleReport(sample.id, score, sents, frames, decode(vocab, res.tokens))


def refine_loop(
    train_manifest: DatasetManifest,
    vocab: Vocab,
    config: ModelConfig,
    rcfg: RefinementConfig = RefinementConfig(),
    schedule: TrainSchedule = TrainSchedule(),
    valid: DatasetManifest | None = None,
    policy: AttentionPolicy = AttentionPolicy(),
    out_dir: str | Path | None = None,
) -> RefinementResult:
    """Alternate training and refinement for ``rcfg.iterations`` rounds.

    Each round trains a fresh model on the current data, decodes every training
    sample, cuts sentences/frames, drops the lowest-scoring samples and hands
    the result to the next round. Validation data is only ever scored.
    """
    out = Path(out_dir) if out_dir else None
    data = train_manifest
    reports: list[IterationReport] = []
    datasets: list[DatasetManifest] = []
    models: list[TitleCoverGenerator] = []
    for it in range(1, rcfg.iterations + 1):
        log_path = out / f"train_log_{it}.jsonl" if out else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
        model = train(data, vocab, config, schedule, valid=valid, log_path=log_path).model
        models.append(model)
        val_scores = None
        if valid is not None and len(valid):
            titles = decode_titles(model, valid, vocab, schedule.val_decode, schedule.val_beam, policy)
            ev = evaluate_titles(titles, valid, vocab)
            val_scores = {"r1": ev.r1, "r2": ev.r2, "rl": ev.rl, "mean": ev.mean}

        refined: dict[str, Sample] = {}
        per_sample: list[SampleReport] = []
        for s in data:
            r, rep = refine_sample(model, s, vocab, rcfg, policy)
            refined[s.id] = r
            per_sample.append(rep)
        kept, dropped = filter_samples({r.id: r.rouge_l for r in per_sample}, rcfg.keep)
        keep_set = set(kept)
        next_data = DatasetManifest([refined[s.id] for s in data if s.id in keep_set], split=data.split)
        report = IterationReport(it, len(data), len(next_data), kept, dropped, per_sample, val_scores)
        reports.append(report)
        datasets.append(next_data)
        if out:
            (out / f"report_{it}.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1), encoding="utf-8")
            write_manifest(next_data, out / f"iter{it}" / "train.jsonl")
        log.info("iteration %d: %d -> %d samples, val %s", it, len(data), len(next_data), val_scores)
        if not len(next_data):
            raise EmptyRefinement(f"iteration {it} kept no samples", reports)
        data = next_data

    def val_mean(r: IterationReport) -> float:
        return r.val_scores["mean"] if r.val_scores else -math.inf

    best = max(range(len(reports)), key=lambda i: (val_mean(reports[i]), -i))
    return RefinementResult(models[best], best + 1, reports, datasets, models)
