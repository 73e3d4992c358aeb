import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tcr.data import (
    FRAME_MAGIC,
    DataError,
    DatasetManifest,
    Sample,
    SynthSpec,
    load_frame_features,
    load_manifest,
    marker_vector,
    synth_dataset,
    write_frame_features,
    write_manifest,
)


def _sample(sid="s0", L=3, d_v=2, cover=None):
    return Sample(sid, "a b .", "c", "a b", np.zeros((L, d_v), np.float32), cover)


def test_sample_validation():
    with pytest.raises(DataError, match="cover index"):
        _sample(cover=3)
    with pytest.raises(DataError, match="non-finite"):
        Sample("x", "", "", "t", np.full((2, 2), np.nan, np.float32))
    with pytest.raises(DataError):
        Sample("x", "", "", "t", np.zeros((0, 2), np.float32))
    assert _sample().text == "a b . c"
    assert Sample("x", " ", "ocr only", "t", np.zeros((1, 1), np.float32)).text == "ocr only"


def test_manifest_unique_ids():
    with pytest.raises(DataError, match="duplicate"):
        DatasetManifest([_sample("a"), _sample("a")])


def test_frame_features_format(tmp_path):
    p = tmp_path / "f.bin"
    write_frame_features(p, np.zeros((1, 4), np.float32))
    raw = p.read_bytes()
    assert struct.unpack_from("<III", raw) == (FRAME_MAGIC, 1, 4)
    assert raw[12:] == b"\x00" * 16
    np.testing.assert_array_equal(load_frame_features(p, 1, 4), np.zeros((1, 4)))


def test_frame_features_round_trip_large(tmp_path):
    m = np.random.default_rng(0).standard_normal((25, 2048)).astype(np.float32)
    p = tmp_path / "f.bin"
    write_frame_features(p, m)
    assert load_frame_features(p, 25, 2048).tobytes() == m.tobytes()


@settings(max_examples=30)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=st.floats(-1e6, 1e6, width=32)))
def test_frame_features_bit_exact(tmp_path_factory, m):
    p = tmp_path_factory.mktemp("f") / "f.bin"
    write_frame_features(p, m)
    assert load_frame_features(p).tobytes() == m.tobytes()


def test_frame_features_errors(tmp_path):
    p = tmp_path / "f.bin"
    write_frame_features(p, np.ones((2, 3), np.float32))
    raw = p.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(raw[:-1])
    with pytest.raises(DataError, match="size"):
        load_frame_features(tmp_path / "trunc.bin")
    (tmp_path / "hdr.bin").write_bytes(raw[:5])
    with pytest.raises(DataError, match="truncated"):
        load_frame_features(tmp_path / "hdr.bin")
    with pytest.raises(DataError, match="expected"):
        load_frame_features(p, L=3, d_v=3)
    bad = bytearray(raw)
    bad[0] ^= 0xFF
    (tmp_path / "magic.bin").write_bytes(bytes(bad))
    with pytest.raises(DataError, match="magic"):
        load_frame_features(tmp_path / "magic.bin")
    write_frame_features(tmp_path / "inf.bin", np.array([[np.inf]], np.float32))
    with pytest.raises(DataError, match="non-finite"):
        load_frame_features(tmp_path / "inf.bin")


def test_manifest_round_trip(tmp_path):
    m = synth_dataset(1, SynthSpec("planted-cover", n_samples=3))
    write_manifest(m, tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert [s.id for s in back] == [s.id for s in m]
    assert all(a.same_as(b) for a, b in zip(m, back))
    write_manifest(back, tmp_path / "again" / "m.jsonl")
    for s in m:
        assert (tmp_path / "frames" / f"{s.id}.bin").read_bytes() == (tmp_path / "again" / "frames" / f"{s.id}.bin").read_bytes()
    assert (tmp_path / "m.jsonl").read_bytes() == (tmp_path / "again" / "m.jsonl").read_bytes()


def test_load_manifest_empty(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert len(load_manifest(tmp_path / "m.jsonl")) == 0


def test_load_manifest_errors(tmp_path):
    m = synth_dataset(1, SynthSpec(n_samples=3, L=25))
    write_manifest(m, tmp_path / "m.jsonl")
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    (tmp_path / "bad.jsonl").write_text(lines[0] + "\n{not json\n")
    with pytest.raises(DataError, match=":2:"):
        load_manifest(tmp_path / "bad.jsonl")
    rec = json.loads(lines[1])
    write_frame_features(tmp_path / rec["frames_path"], np.zeros((24, rec["d_v"]), np.float32))
    with pytest.raises(DataError, match=rec["id"]):
        load_manifest(tmp_path / "m.jsonl")
    rec.pop("title")
    (tmp_path / "missing.jsonl").write_text(json.dumps(rec) + "\n")
    with pytest.raises(DataError, match="missing"):
        load_manifest(tmp_path / "missing.jsonl")


def test_synth_determinism(tmp_path):
    for task in ("copy-prefix", "planted-cover"):
        spec = SynthSpec(task, n_samples=10)
        write_manifest(synth_dataset(7, spec), tmp_path / "a" / "m.jsonl")
        write_manifest(synth_dataset(7, spec), tmp_path / "b" / "m.jsonl")
        assert (tmp_path / "a" / "m.jsonl").read_bytes() == (tmp_path / "b" / "m.jsonl").read_bytes()
        for f in (tmp_path / "a" / "frames").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / "frames" / f.name).read_bytes()


def test_synth_copy_prefix():
    m = synth_dataset(0, SynthSpec("copy-prefix", n_samples=50, k=5))
    for s in m:
        words = [w for w in s.text.split() if w != "."]
        assert s.title.split() == words[:5]
        assert s.cover_index is None


def test_synth_planted_cover():
    spec = SynthSpec("planted-cover", n_samples=50, L=25)
    m = synth_dataset(0, spec)
    markers = m.info["markers"]
    for s in m:
        marker = s.title.split()[0]
        vec = marker_vector(markers.index(marker), spec.d_v, spec.marker_scale)
        hits = [i for i in range(25) if np.array_equal(s.frames[i], vec)]
        assert hits == [s.cover_index]


def test_synth_corruption_and_errors():
    m = synth_dataset(0, SynthSpec(n_samples=50, corrupt_fraction=0.2, id_prefix="t-"))
    bad = set(m.info["corrupted_ids"])
    assert len(bad) == 10 and all(i.startswith("t-") for i in bad)
    clean = [s for s in m if s.id not in bad]
    assert all(s.title.split() == [w for w in s.text.split() if w != "."][:5] for s in clean)
    with pytest.raises(DataError, match="unknown task"):
        synth_dataset(0, SynthSpec("bogus"))
    with pytest.raises(DataError):
        synth_dataset(0, SynthSpec(n_samples=0))
