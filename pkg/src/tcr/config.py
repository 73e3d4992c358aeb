"""Run configuration: strict JSON with presets and a canonical dump."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .decoding import AttentionPolicy
from .model import ModelConfig
from .refinement import RefinementConfig
from .training import TrainSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    train: str | None = None
    valid: str | None = None
    test: str | None = None
    vocab: str | None = None
    checkpoint: str | None = None
    out_dir: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=21128))
    refine: RefinementConfig = field(default_factory=RefinementConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    aggregation: AttentionPolicy = field(default_factory=AttentionPolicy)
    paths: Paths = field(default_factory=Paths)
    seed: int = 0
    decode: str = "beam"
    beam: int = 5
    threads: int = 1

    def __post_init__(self):
        if self.decode not in ("greedy", "beam"):
            raise ConfigError(f"decode must be 'greedy' or 'beam', not {self.decode!r}")
        if self.beam < 1 or self.threads < 1:
            raise ConfigError("beam and threads must be at least 1")
        if self.schedule.seed != self.seed:
            object.__setattr__(self, "schedule", replace(self.schedule, seed=self.seed))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"].pop("seed")
        d["schedule"]["betas"] = list(d["schedule"]["betas"])
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


PRESETS = {
    "full": RunConfig(),
    "tiny": RunConfig(
        model=ModelConfig.tiny(64),
        schedule=TrainSchedule(lr=1e-3),
    ),
}

_SECTIONS = {
    "model": ModelConfig,
    "refine": RefinementConfig,
    "schedule": TrainSchedule,
    "aggregation": AttentionPolicy,
    "paths": Paths,
}


def _merge(cls, base, overrides: dict, where: str):
    if not isinstance(overrides, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name for f in fields(cls)}
    if cls is TrainSchedule:
        names.discard("seed")
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    vals = dict(overrides)
    if "betas" in vals:
        vals["betas"] = tuple(vals["betas"])
    try:
        return replace(base, **vals)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


def from_dict(d: dict, preset: str = "full") -> RunConfig:
    """Overlay ``d`` on a preset; unknown keys at any level are rejected."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    base = PRESETS[preset]
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - top)
    if unknown:
        raise ConfigError(f"unknown key(s) in config: {', '.join(unknown)}")
    kw = {}
    for key, value in d.items():
        if key in _SECTIONS:
            kw[key] = _merge(_SECTIONS[key], getattr(base, key), value, key)
        else:
            kw[key] = value
    try:
        return replace(base, **kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path | None, preset: str = "full") -> RunConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    cfg = from_dict(d, preset)
    env = os.environ.get("TCR_SEED")
    if env is not None:
        try:
            cfg = replace(cfg, seed=int(env))
        except ValueError as e:
            raise ConfigError(f"TCR_SEED must be an integer, got {env!r}") from e
    return cfg
