"""Shared builders for the test suite."""
from __future__ import annotations

import numpy as np
import torch

from tcr.data import Sample, word_list
from tcr.model import ModelConfig, TitleCoverGenerator, collate
from tcr.tokenization import SPECIALS, Vocab

WORDS = word_list(59)


def tiny_vocab(size: int = 64) -> Vocab:
    return Vocab(SPECIALS + tuple(WORDS[: size - len(SPECIALS)]))


def random_sample(rng: np.random.Generator, vocab: Vocab, L: int, n_text: int, m_title: int, d_v: int = 16, sid: str = "s") -> Sample:
    words = [w for w in vocab.tokens if w not in SPECIALS]
    text = " ".join(rng.choice(words, size=n_text)) if n_text else ""
    title = " ".join(rng.choice(words, size=m_title))
    frames = rng.standard_normal((max(L, 1), d_v)).astype(np.float32)
    return Sample(sid, text, "", title, frames)


def random_model(seed: int, config: ModelConfig, init_std: float | None = None) -> TitleCoverGenerator:
    """An eval-mode model with weights drawn under ``seed``.

    A larger ``init_std`` gives sharper, more varied output distributions.
    """
    torch.manual_seed(seed)
    model = TitleCoverGenerator(config)
    if init_std is not None:
        with torch.no_grad():
            for p in model.parameters():
                if p.dim() >= 2:
                    p.normal_(0.0, init_std)
    return model.eval()


@torch.no_grad()
def all_logits(model: TitleCoverGenerator, inp, frames) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """LM-head logits at every position of one assembled input, plus attentions."""
    batch = collate([inp], [frames], model.config.d_v, dtype=next(model.parameters()).dtype)
    acts = model.encode(model.embed(batch), batch.mask)
    return model.lm_head(acts.outputs[-1])[0], [a[0] for a in acts.attentions]
