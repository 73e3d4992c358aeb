"""Multimodal title-cover generator.

Layout of one input sequence::

    [CLS] v_1 .. v_L t_1 .. t_n [SEP] y_1 .. y_m'
    '-------- segment 0 ----------'  '- seg 1 -'

Frame positions hold a placeholder id whose token embedding is replaced by a
linear projection of the frame feature. Source positions attend to each other
bidirectionally; a title position attends to the source and to title positions
up to and including itself.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Sample
from .tokenization import Vocab, encode

log = logging.getLogger(__name__)


class NumericalDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 12
    heads: int = 12
    hidden: int = 768
    d_v: int = 16
    max_len: int = 512
    dropout: float = 0.1
    max_title: int = 20  # title region length including the closing [SEP]
    mask_fraction: float = 0.2
    max_masked: int = 20
    tie_lm_head: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.max_title < 1:
            raise ValueError("max_title must be at least 1")
        if not 0 < self.mask_fraction <= 1:
            raise ValueError("mask_fraction must lie in (0, 1]")
        if self.max_len > 512:
            raise ValueError("max_len may not exceed 512")
        if self.vocab_size < 1 or self.layers < 1 or self.d_v < 1:
            raise ValueError("vocab_size, layers and d_v must be positive")

    @classmethod
    def tiny(cls, vocab_size: int = 64, **kw) -> "ModelConfig":
        """Desk-scale configuration: 2 layers, 2 heads, hidden 32, 48 positions."""
        base = dict(layers=2, heads=2, hidden=32, max_len=48, max_title=8)
        base.update(kw)
        return cls(vocab_size=vocab_size, **base)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TokenizedInput:
    ids: list[int]
    segments: list[int]
    frame_span: tuple[int, int]
    text_span: tuple[int, int]
    title_span: tuple[int, int]
    masked: list[int] = field(default_factory=list)
    targets: list[int] = field(default_factory=list)
    n_text_full: int = 0  # text length before truncation

    @property
    def positions(self) -> list[int]:
        return list(range(len(self.ids)))

    @property
    def n_input(self) -> int:
        """Number of source positions: [CLS], frames, text and [SEP]."""
        return self.title_span[0]

    def __len__(self) -> int:
        return len(self.ids)


def n_masked(config: ModelConfig, m: int) -> int:
    k = math.ceil(config.mask_fraction * m - 1e-9)
    return max(1, min(k, config.max_masked, m))


def title_region(sample: Sample, vocab: Vocab, config: ModelConfig) -> list[int]:
    ids = encode(vocab, sample.title)
    if len(ids) > config.max_title - 1:
        log.warning("title of sample %s truncated from %d to %d tokens", sample.id, len(ids), config.max_title - 1)
        ids = ids[: config.max_title - 1]
    return ids + [vocab.sep_id]


def assemble_input(
    sample: Sample,
    vocab: Vocab,
    config: ModelConfig,
    mode: str = "train",
    *,
    rng: np.random.Generator | None = None,
    generated: list[int] | None = None,
    text_ids: list[int] | None = None,
    use_text: bool = True,
    use_frames: bool = True,
) -> TokenizedInput:
    """Build the input sequence for training or for one decoding step.

    In ``train`` mode a random subset of title-region positions is replaced by
    [MASK]; in ``decode`` mode the title region is ``generated`` followed by one
    [MASK]. Text is cut from the right so that the full title budget fits.
    """
    if mode not in ("train", "decode"):
        raise ValueError(f"unknown mode {mode!r}")
    L = sample.n_frames if use_frames else 0
    if text_ids is None:
        text_ids = encode(vocab, sample.text) if use_text else []
    n_full = len(text_ids)
    room = config.max_len - 2 - L - config.max_title
    if room < 0:
        raise ValueError(f"{L} frames and a {config.max_title}-token title do not fit in {config.max_len} positions")
    text_ids = text_ids[:room]
    if L + len(text_ids) == 0:
        raise ValueError(f"sample {sample.id} has neither text nor frames")
    n = len(text_ids)

    ids = [vocab.cls_id] + [vocab.pad_id] * L + list(text_ids) + [vocab.sep_id]
    t0 = len(ids)
    masked: list[int] = []
    targets: list[int] = []
    if mode == "train":
        title = title_region(sample, vocab, config)
        k = n_masked(config, len(title))
        rng = rng if rng is not None else np.random.default_rng(0)
        picks = sorted(rng.choice(len(title), size=k, replace=False).tolist())
        targets = [title[j] for j in picks]
        region = list(title)
        for j in picks:
            region[j] = vocab.mask_id
        masked = [t0 + j for j in picks]
    else:
        generated = list(generated or [])
        if len(generated) >= config.max_title:
            raise ValueError("generated title already fills the title budget")
        region = generated + [vocab.mask_id]
        masked = [t0 + len(generated)]
    ids += region
    segments = [0] * t0 + [1] * len(region)
    return TokenizedInput(
        ids=ids,
        segments=segments,
        frame_span=(1, 1 + L),
        text_span=(1 + L, 1 + L + n),
        title_span=(t0, len(ids)),
        masked=masked,
        targets=targets,
        n_text_full=n_full,
    )


def build_attention_mask(inp: TokenizedInput) -> np.ndarray:
    """Additive mask over {0, -inf}; row = query position, column = key."""
    T = len(inp)
    t0 = inp.title_span[0]
    mask = np.full((T, T), -np.inf, dtype=np.float32)
    mask[:, :t0] = 0.0
    mask[:t0, t0:] = -np.inf
    tri = np.triu(np.full((T - t0, T - t0), -np.inf, dtype=np.float32), k=1)
    mask[t0:, t0:] = tri
    return mask


@dataclass
class Batch:
    ids: torch.Tensor  # (B, T)
    positions: torch.Tensor  # (B, T)
    segments: torch.Tensor  # (B, T)
    frames: torch.Tensor  # (B, Lmax, d_v)
    is_frame: torch.Tensor  # (B, T) bool
    mask: torch.Tensor  # (B, T, T) additive
    masked_index: torch.Tensor  # (N, 2) rows of (batch, position)
    targets: torch.Tensor  # (N,)
    inputs: list[TokenizedInput]

    def __len__(self) -> int:
        return self.ids.shape[0]


def collate(inputs: list[TokenizedInput], frames: list[np.ndarray], d_v: int, dtype=torch.float32) -> Batch:
    B = len(inputs)
    T = max(len(x) for x in inputs)
    Lmax = max(max(x.frame_span[1] - x.frame_span[0] for x in inputs), 1)
    ids = torch.zeros(B, T, dtype=torch.long)
    pos = torch.zeros(B, T, dtype=torch.long)
    seg = torch.zeros(B, T, dtype=torch.long)
    fr = torch.zeros(B, Lmax, d_v, dtype=dtype)
    is_frame = torch.zeros(B, T, dtype=torch.bool)
    mask = torch.full((B, T, T), -math.inf, dtype=dtype)
    idx, tgt = [], []
    for b, (x, f) in enumerate(zip(inputs, frames)):
        n = len(x)
        ids[b, :n] = torch.tensor(x.ids)
        pos[b, :n] = torch.arange(n)
        seg[b, :n] = torch.tensor(x.segments)
        a, e = x.frame_span
        if e > a:
            fr[b, : e - a] = torch.from_numpy(np.asarray(f[: e - a], dtype=np.float32)).to(dtype)
            is_frame[b, a:e] = True
        mask[b, :n, :n] = torch.from_numpy(build_attention_mask(x)).to(dtype)
        # padding rows see only themselves so that softmax stays finite
        for p in range(n, T):
            mask[b, p, p] = 0.0
        idx.extend((b, p) for p in x.masked)
        tgt.extend(x.targets)
    masked_index = torch.tensor(idx, dtype=torch.long).reshape(-1, 2)
    targets = torch.tensor(tgt, dtype=torch.long)
    return Batch(ids, pos, seg, fr, is_frame, mask, masked_index, targets, list(inputs))


@dataclass
class EncoderActivations:
    outputs: list[torch.Tensor]  # O_0 .. O_layers, each (B, T, d_h)
    attentions: list[torch.Tensor]  # per layer, (B, H, T, T) post-softmax, pre-dropout


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.hidden
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.query = nn.Linear(d, d)
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.attn_out = nn.Linear(d, d)
        self.attn_norm = nn.LayerNorm(d, eps=1e-12)
        self.ff_in = nn.Linear(d, 4 * d)
        self.ff_out = nn.Linear(4 * d, d)
        self.ff_norm = nn.LayerNorm(d, eps=1e-12)
        self.dropout = nn.Dropout(config.dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        return x.view(B, T, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, T, d = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim) + mask[:, None]
        probs = torch.softmax(scores, dim=-1)
        ctx = (self.dropout(probs) @ v).transpose(1, 2).reshape(B, T, d)
        h = self.attn_norm(x + self.dropout(self.attn_out(ctx)))
        out = self.ff_norm(h + self.dropout(self.ff_out(F.gelu(self.ff_in(h)))))
        return out, probs


class LMHead(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.dense = nn.Linear(config.hidden, config.hidden)
        self.norm = nn.LayerNorm(config.hidden, eps=1e-12)
        self.decoder = nn.Linear(config.hidden, config.vocab_size)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.norm(F.gelu(self.dense(h))))


class TitleCoverGenerator(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.position_embedding = nn.Embedding(config.max_len, d)
        self.segment_embedding = nn.Embedding(2, d)
        self.frame_projection = nn.Linear(config.d_v, d)
        self.embed_norm = nn.LayerNorm(d, eps=1e-12)
        self.embed_dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.layers))
        self.lm_head = LMHead(config)
        if config.tie_lm_head:
            self.lm_head.decoder.weight = self.token_embedding.weight
        self.reset_parameters()

    def reset_parameters(self) -> None:
        std = self.config.init_std
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                nn.init.trunc_normal_(p, std=std, a=-2 * std, b=2 * std)
            elif name.endswith("norm.weight"):
                nn.init.ones_(p)
            else:
                nn.init.zeros_(p)

    def embed(self, batch: Batch) -> torch.Tensor:
        """Token (or projected frame) + position + segment embedding."""
        tok = self.token_embedding(batch.ids)
        proj = self.frame_projection(batch.frames.to(tok.dtype))
        full = torch.zeros_like(tok)
        Lf = min(proj.shape[1], tok.shape[1] - 1)
        full[:, 1 : 1 + Lf] = proj[:, :Lf]
        tok = torch.where(batch.is_frame[..., None], full, tok)
        return tok + self.position_embedding(batch.positions) + self.segment_embedding(batch.segments)

    def encode(self, x: torch.Tensor, mask: torch.Tensor) -> EncoderActivations:
        outputs = [x]
        attentions = []
        h = self.embed_dropout(self.embed_norm(x))
        for layer in self.layers:
            h, probs = layer(h, mask.to(h.dtype))
            outputs.append(h)
            attentions.append(probs.detach())
        if not torch.isfinite(h).all():
            raise NumericalDivergence("numerical divergence")
        return EncoderActivations(outputs, attentions)

    def forward(self, batch: Batch) -> tuple[torch.Tensor, EncoderActivations]:
        """Logits at the masked positions, shape (N, |V|), plus activations."""
        acts = self.encode(self.embed(batch), batch.mask)
        last = acts.outputs[-1]
        rows = last[batch.masked_index[:, 0], batch.masked_index[:, 1]]
        return self.lm_head(rows), acts


def training_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross entropy over masked positions, accumulated in float64."""
    if logits.shape[0] == 0:
        raise ValueError("nothing to predict")
    return F.cross_entropy(logits.double(), targets)


def batch_from_samples(
    samples: list[Sample],
    vocab: Vocab,
    config: ModelConfig,
    mode: str = "train",
    rngs: list[np.random.Generator] | None = None,
    dtype=torch.float32,
    **kw,
) -> Batch:
    inputs = [
        assemble_input(s, vocab, config, mode, rng=None if rngs is None else rngs[i], **kw)
        for i, s in enumerate(samples)
    ]
    return collate(inputs, [s.frames for s in samples], config.d_v, dtype=dtype)
