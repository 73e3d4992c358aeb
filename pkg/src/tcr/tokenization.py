"""WordPiece-style vocabulary, greedy longest-match encoding and sentence spans."""
from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
CONTINUATION = "##"
SENTENCE_END = frozenset("。！？!?.;\n")


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2A6DF
        or 0xF900 <= cp <= 0xFAFF
        or 0x2F800 <= cp <= 0x2FA1F
    )


def _is_punct(ch: str) -> bool:
    return ch in SENTENCE_END or unicodedata.category(ch).startswith("P")


def pretokenize(text: str) -> list[str]:
    """Split text into matching units.

    Whitespace separates units; every punctuation mark and every CJK character
    is a unit of its own.
    """
    units: list[str] = []
    buf: list[str] = []
    for ch in text:
        if ch.isspace():
            if buf:
                units.append("".join(buf))
                buf = []
        elif _is_punct(ch) or _is_cjk(ch):
            if buf:
                units.append("".join(buf))
                buf = []
            units.append(ch)
        else:
            buf.append(ch)
    if buf:
        units.append("".join(buf))
    return units


def normalize(text: str) -> str:
    return " ".join(pretokenize(text))


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")
        for sp in SPECIALS:
            if sp not in index:
                raise ValueError(f"vocab is missing special token {sp}")
        if index[PAD] != 0:
            raise ValueError("[PAD] must have id 0")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def lookup(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.index[s] for s in SPECIALS)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(tuple(text.split("\n")[:-1]))


def build_vocab(corpus: Iterable[str], size: int) -> Vocab:
    """Build a vocabulary of at most ``size`` entries from ``corpus``.

    Whole words are ranked first by frequency, then single-character pieces
    (word-initial and ``##`` continuation) fill the remaining room so that
    unseen words can still be spelled. Ties are broken lexicographically.
    """
    if size < len(SPECIALS) + 1:
        raise ValueError(f"vocab size must be at least {len(SPECIALS) + 1}")
    words: Counter[str] = Counter()
    for line in corpus:
        words.update(pretokenize(line))
    if not words:
        raise ValueError("empty corpus")

    pieces: Counter[str] = Counter()
    for w, c in words.items():
        pieces[w[0]] += c
        for ch in w[1:]:
            pieces[CONTINUATION + ch] += c

    room = size - len(SPECIALS)
    chosen: list[str] = []
    seen = set(SPECIALS)
    for ranked in (words, pieces):
        for tok, _ in sorted(ranked.items(), key=lambda kv: (-kv[1], kv[0])):
            if len(chosen) == room:
                break
            if tok not in seen:
                seen.add(tok)
                chosen.append(tok)
    return Vocab(SPECIALS + tuple(chosen))


def _wordpiece(vocab: Vocab, unit: str) -> list[int]:
    ids = []
    start = 0
    while start < len(unit):
        end = len(unit)
        piece_id = None
        while end > start:
            piece = unit[start:end]
            if start > 0:
                piece = CONTINUATION + piece
            if piece in vocab.index:
                piece_id = vocab.index[piece]
                break
            end -= 1
        if piece_id is None:
            return [vocab.unk_id]
        ids.append(piece_id)
        start = end
    return ids


def encode(vocab: Vocab, text: str) -> list[int]:
    ids: list[int] = []
    for unit in pretokenize(text):
        ids.extend(_wordpiece(vocab, unit))
    return ids


def decode(vocab: Vocab, ids: Iterable[int]) -> str:
    dropped = {vocab.pad_id, vocab.cls_id, vocab.sep_id, vocab.mask_id}
    out: list[str] = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise ValueError(f"token id {i} out of range for vocab of size {len(vocab)}")
        if i in dropped:
            continue
        tok = vocab.tokens[i]
        if tok.startswith(CONTINUATION) and out:
            out[-1] += tok[len(CONTINUATION):]
        else:
            out.append(tok)
    return " ".join(out)


def id_tokens(vocab: Vocab, ids: Iterable[int]) -> list[str]:
    return [vocab.tokens[int(i)] for i in ids]


class SentenceSpan(NamedTuple):
    index: int
    start: int
    end: int


def split_sentences(text: str) -> list[str]:
    """Split on terminal punctuation, keeping the terminator with its sentence."""
    sentences = []
    buf: list[str] = []
    for ch in text:
        buf.append(ch)
        if ch in SENTENCE_END:
            s = "".join(buf).strip()
            if s:
                sentences.append(s)
            buf = []
    tail = "".join(buf).strip()
    if tail:
        sentences.append(tail)
    return sentences


def segment_sentences(
    vocab: Vocab, text: str, encoded_length: int | None = None
) -> list[SentenceSpan]:
    """Token spans of each sentence of ``text`` over its encoding.

    Sentence boundaries always fall on unit boundaries, so encoding sentence by
    sentence reproduces the encoding of the whole text.
    """
    spans = []
    offset = 0
    for s in split_sentences(text):
        n = len(encode(vocab, s))
        spans.append(SentenceSpan(len(spans), offset, offset + n))
        offset += n
    if encoded_length is not None and offset != encoded_length:
        raise ValueError(f"encoded length {encoded_length} does not match text ({offset} tokens)")
    return spans
