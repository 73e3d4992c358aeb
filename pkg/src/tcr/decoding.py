"""Step-wise mask-predict decoding (greedy and beam) and attention-argmax covers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import torch

from .data import Sample
from .model import EncoderActivations, ModelConfig, TitleCoverGenerator, TokenizedInput, assemble_input, collate
from .tokenization import Vocab, decode, encode


@dataclass(frozen=True)
class AttentionPolicy:
    """Which attention probabilities are read out for covers and refinement.

    ``layer`` indexes encoder layers (negative counts from the top); ``None``
    averages all layers. ``heads`` is ``"mean"`` or ``"max"``.
    """

    layer: int | None = -1
    heads: str = "mean"

    def __post_init__(self):
        if self.heads not in ("mean", "max"):
            raise ValueError(f"unknown head aggregation {self.heads!r}")

    def reduce(self, acts: EncoderActivations) -> torch.Tensor:
        """(B, T, T) aggregated attention."""
        if self.layer is None:
            stack = torch.stack(acts.attentions)  # (layers, B, H, T, T)
            per_head = stack.mean(0)
        else:
            per_head = acts.attentions[self.layer]
        return per_head.mean(1) if self.heads == "mean" else per_head.amax(1)


@dataclass
class GenerationResult:
    tokens: list[int]
    step_attention: list[np.ndarray]  # one vector over source positions per emitted token
    log_prob: float
    frame_span: tuple[int, int]
    text_span: tuple[int, int]
    cls_attention: np.ndarray  # [CLS] row over source positions, for the empty-title fallback
    finished: bool = True
    cover_index: int | None = None
    frame_scores: np.ndarray | None = None

    @property
    def n_input(self) -> int:
        return len(self.cls_attention)


@dataclass
class BeamHypothesis:
    tokens: list[int]
    log_prob: float
    attention: list[np.ndarray] = field(default_factory=list)
    finished: bool = False


def default_banned(vocab: Vocab) -> frozenset[int]:
    return frozenset({vocab.pad_id, vocab.cls_id, vocab.mask_id})


class Decoder:
    """Decoding context for one sample.

    The text encoding is computed once and reused for every step.
    """

    def __init__(
        self,
        model: TitleCoverGenerator,
        sample: Sample,
        vocab: Vocab,
        policy: AttentionPolicy = AttentionPolicy(),
        use_text: bool = True,
        use_frames: bool = True,
    ):
        self.model = model
        self.sample = sample
        self.vocab = vocab
        self.policy = policy
        self.use_text = use_text
        self.use_frames = use_frames
        self.text_ids = encode(vocab, sample.text) if use_text else []

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def make_input(self, generated: list[int]) -> TokenizedInput:
        return assemble_input(
            self.sample,
            self.vocab,
            self.config,
            "decode",
            generated=generated,
            text_ids=self.text_ids,
            use_text=self.use_text,
            use_frames=self.use_frames,
        )

    @torch.no_grad()
    def step(self, prefixes: list[list[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Log-probabilities (B, |V|) at each prefix's [MASK], its attention rows
        over source positions (B, n_input), and the [CLS] rows (B, n_input).

        Prefixes are run one at a time so that a prefix's scores never depend
        on which other hypotheses share the step.
        """
        inputs = [self.make_input(p) for p in prefixes]
        for x in inputs:
            if sum(1 for i in x.ids[x.title_span[0] :] if i == self.vocab.mask_id) != 1:
                raise ValueError("decoding input must contain exactly one [MASK] in the title region")
        was_training = self.model.training
        self.model.eval()
        lps, rows, cls_rows = [], [], []
        try:
            for x in inputs:
                batch = collate([x], [self.sample.frames], self.config.d_v)
                logits, acts = self.model(batch)
                att = self.policy.reduce(acts)[0].double().numpy()
                lps.append(torch.log_softmax(logits[0].double(), dim=-1).numpy())
                rows.append(att[x.masked[0], : x.n_input])
                cls_rows.append(att[0, : x.n_input])
        finally:
            self.model.train(was_training)
        return np.stack(lps), np.stack(rows), np.stack(cls_rows)

    def spans(self) -> tuple[tuple[int, int], tuple[int, int]]:
        x = self.make_input([])
        return x.frame_span, x.text_span


def decode_step(
    model: TitleCoverGenerator, sample: Sample, vocab: Vocab, generated: list[int], policy: AttentionPolicy = AttentionPolicy()
) -> tuple[np.ndarray, np.ndarray]:
    """Log-probabilities at the next title position and its source attention row."""
    lp, rows, _ = Decoder(model, sample, vocab, policy).step([list(generated)])
    return lp[0], rows[0]


def _allowed(lp: np.ndarray, banned: Iterable[int]) -> np.ndarray:
    lp = lp.copy()
    banned = list(banned)
    if banned:
        lp[..., banned] = -np.inf
    return lp


def greedy_decode(
    model: TitleCoverGenerator,
    sample: Sample,
    vocab: Vocab,
    policy: AttentionPolicy = AttentionPolicy(),
    banned: Iterable[int] | None = None,
    **kw,
) -> GenerationResult:
    dec = Decoder(model, sample, vocab, policy, **kw)
    banned = default_banned(vocab) if banned is None else banned
    tokens: list[int] = []
    attn: list[np.ndarray] = []
    total = 0.0
    cls_row = None
    finished = False
    for _ in range(model.config.max_title):
        lp, rows, cls_rows = dec.step([tokens])
        if cls_row is None:
            cls_row = cls_rows[0]
        scores = _allowed(lp[0], banned)
        tok = int(np.argmax(scores))
        total += float(lp[0, tok])
        if tok == vocab.sep_id:
            finished = True
            break
        tokens.append(tok)
        attn.append(rows[0])
    fs, ts = dec.spans()
    result = GenerationResult(tokens, attn, total, fs, ts, cls_row, finished)
    return with_cover(result)


def beam_decode(
    model: TitleCoverGenerator,
    sample: Sample,
    vocab: Vocab,
    beam: int = 5,
    policy: AttentionPolicy = AttentionPolicy(),
    banned: Iterable[int] | None = None,
    length_penalty: float = 0.0,
    **kw,
) -> GenerationResult:
    """Beam search scored by summed token log-probabilities.

    Hypotheses that emit [SEP] or reach the title budget retire into a pool;
    the best pooled hypothesis is returned. Equal scores prefer the
    lexicographically smaller token sequence. ``length_penalty`` > 0 divides
    final scores by ``len ** length_penalty`` when ranking the pool.
    """
    if beam < 1:
        raise ValueError("beam width must be at least 1")
    dec = Decoder(model, sample, vocab, policy, **kw)
    banned = default_banned(vocab) if banned is None else banned
    m_max = model.config.max_title
    sep = vocab.sep_id
    live = [BeamHypothesis([], 0.0)]
    pool: list[BeamHypothesis] = []
    cls_row = None

    def final_score(h: BeamHypothesis) -> float:
        if length_penalty:
            return h.log_prob / max(1, len(h.tokens) + h.finished) ** length_penalty
        return h.log_prob

    for t in range(m_max):
        lp, rows, cls_rows = dec.step([h.tokens for h in live])
        if cls_row is None:
            cls_row = cls_rows[0]
        lp_allowed = _allowed(lp, banned)
        cands = []
        for b, h in enumerate(live):
            order = np.argsort(-lp_allowed[b], kind="stable")[:beam]
            for tok in order:
                tok = int(tok)
                if lp_allowed[b, tok] == -np.inf:
                    continue
                cands.append((h.log_prob + float(lp[b, tok]), h.tokens + [tok], b, tok))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live_next = []
        for score, seq, b, tok in cands[:beam]:
            parent = live[b]
            if tok == sep:
                pool.append(BeamHypothesis(parent.tokens, score, parent.attention, True))
            else:
                h = BeamHypothesis(seq, score, parent.attention + [rows[b]])
                if len(seq) == m_max:
                    pool.append(h)
                else:
                    live_next.append(h)
        live = live_next
        if not live:
            break
        # log-probabilities only decrease, so no live hypothesis can overtake
        if not length_penalty and pool and max(h.log_prob for h in pool) >= max(h.log_prob for h in live):
            break
    if not pool:
        pool = live
    best = min(pool, key=lambda h: (-final_score(h), h.tokens + ([sep] if h.finished else [])))
    fs, ts = dec.spans()
    result = GenerationResult(best.tokens, best.attention, best.log_prob, fs, ts, cls_row, best.finished)
    return with_cover(result)


def frame_scores(result: GenerationResult) -> np.ndarray:
    a, e = result.frame_span
    if result.step_attention:
        return np.sum([row[a:e] for row in result.step_attention], axis=0)
    return np.asarray(result.cls_attention[a:e])


def select_cover(result: GenerationResult) -> int | None:
    """Frame with the largest summed attention from generated tokens (lowest index on ties).

    Falls back to the [CLS] row when nothing was generated.
    """
    scores = frame_scores(result)
    if len(scores) == 0:
        return None
    return int(np.argmax(scores))


def with_cover(result: GenerationResult) -> GenerationResult:
    result.frame_scores = frame_scores(result)
    result.cover_index = select_cover(result)
    return result


def teacher_forced_attention(
    model: TitleCoverGenerator, sample: Sample, vocab: Vocab, policy: AttentionPolicy = AttentionPolicy(), **kw
) -> GenerationResult:
    """Attention rows obtained by feeding the gold title instead of generated tokens."""
    dec = Decoder(model, sample, vocab, policy, **kw)
    gold = encode(vocab, sample.title)[: model.config.max_title - 1]
    prefixes = [gold[:j] for j in range(len(gold) + 1)]
    lp, rows, cls_rows = dec.step(prefixes)
    targets = gold + [vocab.sep_id]
    total = float(sum(lp[j, t] for j, t in enumerate(targets)))
    fs, ts = dec.spans()
    result = GenerationResult(gold, [rows[j] for j in range(len(gold))], total, fs, ts, cls_rows[0], True)
    return with_cover(result)


def generate(
    model: TitleCoverGenerator,
    sample: Sample,
    vocab: Vocab,
    beam: int = 5,
    policy: AttentionPolicy = AttentionPolicy(),
    greedy: bool = False,
    **kw,
) -> GenerationResult:
    if greedy:
        return greedy_decode(model, sample, vocab, policy, **kw)
    return beam_decode(model, sample, vocab, beam, policy, **kw)


def generation_record(sample: Sample, result: GenerationResult, vocab: Vocab) -> dict:
    return {
        "id": sample.id,
        "title": decode(vocab, result.tokens),
        "log_prob": result.log_prob,
        "cover_index": result.cover_index,
        "frame_scores": [float(x) for x in (result.frame_scores if result.frame_scores is not None else [])],
    }
