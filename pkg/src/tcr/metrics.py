"""Rouge-1/2/L F1, the Lead-3 extractive baseline and corpus evaluation."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass
from typing import Callable, Hashable, Sequence

from .data import DatasetManifest, Sample
from .tokenization import Vocab, encode, split_sentences


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def _prf(overlap: int, n_hyp: int, n_ref: int) -> PRF:
    p = overlap / n_hyp if n_hyp else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f)


def ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(hyp: Sequence[Hashable], ref: Sequence[Hashable], n: int = 1) -> PRF:
    if not ref:
        raise ValueError("empty reference")
    h, r = ngrams(hyp, n), ngrams(ref, n)
    overlap = sum((h & r).values())
    return _prf(overlap, sum(h.values()), sum(r.values()))


def lcs_length(a: Sequence[Hashable], b: Sequence[Hashable]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> PRF:
    if not ref:
        raise ValueError("empty reference")
    return _prf(lcs_length(hyp, ref), len(hyp), len(ref))


@dataclass(frozen=True)
class RougeScores:
    r1: PRF
    r2: PRF
    rl: PRF

    @property
    def mean_f1(self) -> float:
        return (self.r1.f1 + self.r2.f1 + self.rl.f1) / 3


def rouge_scores(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> RougeScores:
    return RougeScores(rouge_n(hyp, ref, 1), rouge_n(hyp, ref, 2), rouge_l(hyp, ref))


def lead3(text: str) -> str:
    return " ".join(split_sentences(text)[:3])


def score_tokens(vocab: Vocab, text: str, level: str = "token") -> list:
    """Units Rouge is computed over: model tokens by default, or characters."""
    if level == "token":
        return encode(vocab, text)
    if level == "char":
        return [c for c in text if not c.isspace()]
    raise ValueError(f"unknown scoring level {level!r}")


@dataclass
class EvaluationReport:
    n_samples: int
    r1: float
    r2: float
    rl: float
    per_sample: list[dict]

    @property
    def mean(self) -> float:
        return (self.r1 + self.r2 + self.rl) / 3

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_titles(
    titles: dict[str, str], manifest: DatasetManifest, vocab: Vocab, level: str = "token"
) -> EvaluationReport:
    """Mean per-sample Rouge F1 of ``titles`` (id -> text) against gold titles."""
    if len(manifest) == 0:
        raise ValueError("empty manifest")
    rows = []
    for s in manifest:
        if s.id not in titles:
            raise KeyError(f"no generated title for sample {s.id}")
        sc = rouge_scores(score_tokens(vocab, titles[s.id], level), score_tokens(vocab, s.title, level))
        rows.append({"id": s.id, "title": titles[s.id], "r1": sc.r1.f1, "r2": sc.r2.f1, "rl": sc.rl.f1})
    n = len(rows)
    return EvaluationReport(
        n_samples=n,
        r1=sum(r["r1"] for r in rows) / n,
        r2=sum(r["r2"] for r in rows) / n,
        rl=sum(r["rl"] for r in rows) / n,
        per_sample=rows,
    )


def evaluate(
    generate: Callable[[Sample], str], manifest: DatasetManifest, vocab: Vocab, level: str = "token"
) -> EvaluationReport:
    """Run ``generate`` on every sample and score it; use ``lead3_generator`` for the baseline."""
    return evaluate_titles({s.id: generate(s) for s in manifest}, manifest, vocab, level)


def lead3_generator(sample: Sample) -> str:
    return lead3(sample.text)
