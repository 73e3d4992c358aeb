from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcr.tokenization import (
    CLS,
    SEP,
    SPECIALS,
    Vocab,
    build_vocab,
    decode,
    encode,
    normalize,
    pretokenize,
    segment_sentences,
    split_sentences,
)

WORDS = ["ka", "lo", "mibe", "tu", "sora", "ne", "pix", "vad"]


@pytest.fixture(scope="module")
def word_vocab():
    return build_vocab([" ".join(WORDS) + " . ! ?"], 64)


def test_build_vocab_small_corpus():
    v = build_vocab(["ab ab"], 10)
    assert "ab" in v
    assert all(s in v for s in SPECIALS)
    assert v.pad_id == 0
    assert len(set(v.special_ids)) == 5


@pytest.mark.parametrize("corpus", [[""], [], ["   \n  "]])
def test_build_vocab_empty_corpus(corpus):
    with pytest.raises(ValueError, match="empty corpus"):
        build_vocab(corpus, 10)


def test_build_vocab_rejects_tiny_size():
    with pytest.raises(ValueError):
        build_vocab(["a"], 5)


def test_build_vocab_frequency_oracle():
    import random

    rng = random.Random(3)
    words = [f"w{i:02d}" for i in range(50)]
    weights = [1.0 / (i + 1) for i in range(50)]
    corpus = [" ".join(rng.choices(words, weights, k=8)) for _ in range(1000)]
    v = build_vocab(corpus, 64)
    assert len(v) == 64
    counts = Counter(w for line in corpus for w in line.split())
    top = max(counts, key=lambda w: (counts[w], w))
    assert top in v
    # words come before pieces, in (-count, token) order
    ranked = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    assert list(v.tokens[5 : 5 + len(ranked)]) == ranked


def test_vocab_invariants(word_vocab):
    for i, tok in enumerate(word_vocab.tokens):
        assert word_vocab.lookup(tok) == i
    with pytest.raises(ValueError):
        Vocab(("[UNK]", "[PAD]", "[CLS]", "[SEP]", "[MASK]"))
    with pytest.raises(ValueError):
        Vocab(SPECIALS + ("a", "a"))
    with pytest.raises(ValueError):
        Vocab(("[PAD]", "[UNK]", "a"))


def test_vocab_file_round_trip(tmp_path, word_vocab):
    p = tmp_path / "vocab.txt"
    word_vocab.save(p)
    lines = p.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "[PAD]" and len(lines) == len(word_vocab)
    assert Vocab.load(p) == word_vocab


def test_encode_examples():
    v = Vocab(SPECIALS + ("ab", "c", "##c", "w"))
    assert encode(v, "") == []
    assert encode(v, "w") == [v.lookup("w")]
    assert encode(v, "abc") == [v.lookup("ab"), v.lookup("##c")]
    # a unit that cannot be spelled becomes a single [UNK]
    assert encode(v, "abz w") == [v.unk_id, v.lookup("w")]


def test_encode_cjk_characters_are_units():
    assert pretokenize("视频标题ok.") == ["视", "频", "标", "题", "ok", "."]
    v = build_vocab(["视频 标题"], 20)
    assert decode(v, encode(v, "视频标题")) == "视 频 标 题"


def test_decode_examples(word_vocab):
    w = word_vocab.lookup("ka")
    assert decode(word_vocab, []) == ""
    assert decode(word_vocab, [word_vocab.lookup(CLS), w, word_vocab.lookup(SEP)]) == "ka"
    with pytest.raises(ValueError):
        decode(word_vocab, [len(word_vocab)])
    with pytest.raises(ValueError):
        decode(word_vocab, [-1])


@given(st.lists(st.sampled_from(WORDS + [".", "!", "?"]), max_size=20), st.sampled_from([" ", "  ", "\t"]))
def test_round_trip(word_vocab, words, sep):
    text = sep.join(words)
    ids = encode(word_vocab, text)
    assert not set(ids) & (word_vocab.special_ids - {word_vocab.unk_id})
    assert decode(word_vocab, ids) == normalize(text)


@given(st.text(alphabet="abcdkx .!?;\n。", max_size=40))
def test_encode_never_emits_specials_but_unk(text):
    v = build_vocab(["ab cd ab . !"], 12)
    assert all(i == v.unk_id or i not in v.special_ids for i in encode(v, text))


def test_split_sentences_examples():
    assert split_sentences("a. b.") == ["a.", "b."]
    assert split_sentences("no punctuation here") == ["no punctuation here"]
    assert split_sentences("x! y? z") == ["x!", "y?", "z"]
    assert split_sentences("") == []


def test_segment_sentences_offsets(word_vocab):
    text = "ka lo! mibe? tu sora ne"
    spans = segment_sentences(word_vocab, text, len(encode(word_vocab, text)))
    lens = [len(encode(word_vocab, s)) for s in ("ka lo!", "mibe?", "tu sora ne")]
    assert [(s.start, s.end) for s in spans] == [(0, lens[0]), (lens[0], lens[0] + lens[1]), (lens[0] + lens[1], sum(lens))]
    assert [s.index for s in spans] == [0, 1, 2]
    with pytest.raises(ValueError):
        segment_sentences(word_vocab, text, 99)


@settings(max_examples=200)
@given(st.text(alphabet=list("kalomibe .!?;\n。zq"), max_size=60))
def test_segment_sentences_cover(text):
    v = build_vocab(["ka lo mibe . ! ?"], 20)
    n = len(encode(v, text))
    spans = segment_sentences(v, text, n)
    pos = 0
    for s in spans:
        assert s.start == pos and s.end >= s.start
        pos = s.end
    assert pos == n
    # sentence-by-sentence encoding reproduces the whole encoding
    assert sum((encode(v, s) for s in split_sentences(text)), []) == encode(v, text)


def test_build_vocab_deterministic():
    corpus = ["b a c a", "d d b ."]
    assert build_vocab(corpus, 12) == build_vocab(list(corpus), 12)
