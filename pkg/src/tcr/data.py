"""Dataset manifests, frame-feature sidecar files and synthetic datasets."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FRAME_MAGIC = 0x46524354  # b"TCRF" read as a little-endian uint32
_HEADER = struct.Struct("<III")
DEFAULT_FRAMES = 25
DEFAULT_DV = 16

TASKS = ("copy-prefix", "planted-cover")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    id: str
    asr: str
    ocr: str
    title: str
    frames: np.ndarray  # (L, d_v) float32
    cover_index: int | None = None

    def __post_init__(self):
        f = self.frames
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise DataError(f"sample {self.id}: frames must be a non-empty L x d_v matrix")
        if not np.all(np.isfinite(f)):
            raise DataError(f"sample {self.id}: non-finite frame features")
        if self.cover_index is not None and not 0 <= self.cover_index < f.shape[0]:
            raise DataError(f"sample {self.id}: cover index {self.cover_index} outside [0, {f.shape[0]})")

    @property
    def text(self) -> str:
        """ASR then OCR, joined by one space."""
        return " ".join(t for t in (self.asr.strip(), self.ocr.strip()) if t)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def same_as(self, other: "Sample") -> bool:
        return (
            self.id == other.id
            and self.asr == other.asr
            and self.ocr == other.ocr
            and self.title == other.title
            and self.cover_index == other.cover_index
            and self.frames.shape == other.frames.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )


@dataclass
class DatasetManifest:
    samples: list[Sample]
    split: str | None = None
    # Synthesis bookkeeping (e.g. corrupted ids); never serialized.
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DataError(f"duplicate sample id {dup!r}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}


def write_frame_features(path: str | Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise DataError("frame features must be 2-D")
    L, d_v = frames.shape
    payload = np.ascontiguousarray(frames, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(FRAME_MAGIC, L, d_v) + payload)


def load_frame_features(path: str | Path, L: int | None = None, d_v: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, fl, fd = _HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise DataError(f"{path}: bad magic {magic:#x}")
    if (L is not None and fl != L) or (d_v is not None and fd != d_v):
        raise DataError(f"{path}: header declares {fl}x{fd}, expected {L}x{d_v}")
    if fl < 1 or fd < 1:
        raise DataError(f"{path}: empty frame matrix")
    expected = _HEADER.size + 4 * fl * fd
    if len(raw) != expected:
        raise DataError(f"{path}: size {len(raw)} bytes, expected {expected}")
    frames = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(fl, fd).astype(np.float32)
    if not np.all(np.isfinite(frames)):
        raise DataError(f"{path}: non-finite frame features")
    return frames


_KEYS = ("id", "asr", "ocr", "title", "frames_path", "L", "d_v", "cover_index")


def load_manifest(path: str | Path, split: str | None = None) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("not an object")
            missing = [k for k in _KEYS if k not in rec]
            if missing:
                raise ValueError(f"missing keys {missing}")
            L, d_v = int(rec["L"]), int(rec["d_v"])
        except (ValueError, TypeError) as e:
            raise DataError(f"{path}:{lineno}: malformed manifest line ({e})") from e
        sid = str(rec["id"])
        try:
            frames = load_frame_features(base / rec["frames_path"], L, d_v)
        except (DataError, OSError) as e:
            raise DataError(f"sample {sid}: {e}") from e
        cover = rec["cover_index"]
        samples.append(
            Sample(sid, rec["asr"], rec["ocr"], rec["title"], frames, None if cover is None else int(cover))
        )
    return DatasetManifest(samples, split=split)


def write_manifest(manifest: DatasetManifest, path: str | Path, frames_dir: str = "frames") -> None:
    """Write ``manifest`` as JSONL with one frame sidecar per sample under ``frames_dir``."""
    path = Path(path)
    fdir = path.parent / frames_dir
    fdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in manifest.samples:
        rel = f"{frames_dir}/{s.id}.bin"
        write_frame_features(path.parent / rel, s.frames)
        rec = {
            "id": s.id,
            "asr": s.asr,
            "ocr": s.ocr,
            "title": s.title,
            "frames_path": rel,
            "L": s.n_frames,
            "d_v": s.frames.shape[1],
            "cover_index": s.cover_index,
        }
        lines.append(json.dumps(rec, ensure_ascii=False))
    path.write_text("".join(l + "\n" for l in lines), encoding="utf-8")


@dataclass(frozen=True)
class SynthSpec:
    task: str = "copy-prefix"
    n_samples: int = 200
    n_words: int = 40
    sentences: tuple[int, int] = (3, 5)  # inclusive range of sentences per text
    sentence_len: tuple[int, int] = (3, 6)  # inclusive range of words per sentence
    k: int = 5  # title prefix length
    L: int = DEFAULT_FRAMES
    d_v: int = DEFAULT_DV
    n_markers: int = 8
    marker_scale: float = 3.0
    corrupt_fraction: float = 0.0
    id_prefix: str = ""


def word_list(n_words: int, seed: int = 0) -> list[str]:
    """Deterministic pseudo-words built from consonant-vowel syllables."""
    rng = np.random.default_rng(seed)
    cons, vows = "bdfgklmnprstvz", "aeiou"
    words: list[str] = []
    seen = set()
    while len(words) < n_words:
        n_syl = int(rng.integers(1, 3))
        w = "".join(cons[rng.integers(len(cons))] + vows[rng.integers(len(vows))] for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def marker_vector(marker_id: int, d_v: int, scale: float = 1.0) -> np.ndarray:
    """The frame feature a planted cover carries for marker ``marker_id``."""
    rng = np.random.default_rng([0x7C0FE, marker_id])
    return (scale * rng.standard_normal(d_v)).astype(np.float32)


def synth_dataset(seed: int, spec: SynthSpec) -> DatasetManifest:
    if spec.task not in TASKS:
        raise DataError(f"unknown task {spec.task!r}; expected one of {TASKS}")
    if spec.n_samples < 1:
        raise DataError("sample count must be at least 1")
    rng = np.random.default_rng(seed)
    words = word_list(spec.n_words)
    markers = [f"mk{chr(ord('a') + i // 26)}{chr(ord('a') + i % 26)}" for i in range(spec.n_markers)]

    n_corrupt = int(round(spec.corrupt_fraction * spec.n_samples))
    corrupted = set(rng.choice(spec.n_samples, size=n_corrupt, replace=False).tolist()) if n_corrupt else set()

    samples = []
    for i in range(spec.n_samples):
        n_sent = int(rng.integers(spec.sentences[0], spec.sentences[1] + 1))
        sents = []
        for _ in range(n_sent):
            n = int(rng.integers(spec.sentence_len[0], spec.sentence_len[1] + 1))
            sents.append([words[j] for j in rng.integers(len(words), size=n)])
        flat = [w for s in sents for w in s]
        text = " ".join(" ".join(s) + " ." for s in sents)
        frames = rng.standard_normal((spec.L, spec.d_v)).astype(np.float32)
        cover = None
        if spec.task == "copy-prefix":
            title_words = flat[: spec.k]
        else:
            m = int(rng.integers(len(markers)))
            cover = int(rng.integers(spec.L))
            frames[cover] = marker_vector(m, spec.d_v, spec.marker_scale)
            title_words = [markers[m]] + flat[: spec.k - 1]
        if i in corrupted:
            title_words = [words[j] for j in rng.integers(len(words), size=len(title_words))]
        sid = f"{spec.id_prefix}{i:05d}"
        samples.append(Sample(sid, text, "", " ".join(title_words), frames, cover))
    info = {"corrupted_ids": sorted(f"{spec.id_prefix}{i:05d}" for i in corrupted), "markers": markers}
    return DatasetManifest(samples, info=info)
