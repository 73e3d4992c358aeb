"""Versioned binary checkpoint format.

Layout (all integers little-endian uint32)::

    magic "TCRC" | version | config length | config JSON (UTF-8, sorted keys)
    tensor count | per tensor: name length, name, ndim, dims..., float32 payload
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, TitleCoverGenerator

MAGIC = b"TCRC"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def state_to_bytes(config: ModelConfig, state: dict[str, torch.Tensor]) -> bytes:
    cfg = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(cfg)), cfg, _U32.pack(len(state))]
    for name in sorted(state):
        t = state[name].detach().cpu().to(torch.float32).contiguous().numpy()
        enc = name.encode("utf-8")
        parts += [_U32.pack(len(enc)), enc, _U32.pack(t.ndim)]
        parts += [_U32.pack(d) for d in t.shape]
        parts.append(t.astype("<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, model: TitleCoverGenerator) -> None:
    Path(path).write_bytes(state_to_bytes(model.config, model.state_dict()))


def _reader(raw: bytes):
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError("truncated checkpoint")
        chunk = raw[off : off + n]
        off += n
        return chunk

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    def rest() -> int:
        return len(raw) - off

    return take, u32, rest


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, torch.Tensor]]:
    raw = Path(path).read_bytes()
    take, u32, rest = _reader(raw)
    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    version = u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig(**json.loads(take(u32()).decode("utf-8")))
    state = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        shape = tuple(u32() for _ in range(u32()))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if rest():
        raise CheckpointError(f"{path}: {rest()} trailing bytes")
    return config, state


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> TitleCoverGenerator:
    config, state = read_checkpoint(path)
    if expected is not None:
        for key, want in expected.to_dict().items():
            have = getattr(config, key)
            if have != want:
                raise CheckpointError(f"checkpoint/config mismatch in field {key!r}: checkpoint has {have!r}, config has {want!r}")
    model = TitleCoverGenerator(config)
    model.load_state_dict(state)
    model.eval()
    return model
