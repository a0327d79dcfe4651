"""Run configuration: defaults, JSON loading and validation."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

CONFIG_ENV = "COPONERF_CONFIG"


@dataclass(frozen=True)
class Config:
    image_size: int = 256
    seed: int = 0
    pyramid_seed: int = 0
    channels: tuple = (64, 96, 128)
    levels: int = 3
    feature_mode: str = "conv"
    n_interleave: int = 2
    agg_mix: float = 0.1
    agg_dk: int = 32
    temperature: float | None = None  # None: 1/sqrt(channels)
    flow_mode: str = "argmax"
    tau: float = 2.0  # feature cells
    head_seed: int = 0
    renderer_seed: int = 0
    samples: int = 64
    rays: int = 192
    near: float = 0.1
    far: float = 20.0
    oracle_scoring: bool = False
    oracle_temperature: float = 1e-4
    teacher_forcing: bool = False
    lambda_tri: float = 0.01
    huber_delta: float = 1.0
    small_max: float = 0.5
    large_min: float = 0.75
    overlap_stride: int = 4
    weights_dir: str | None = None
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        validate(self)

    def with_overrides(self, **kw) -> "Config":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    def to_json(self) -> str:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return json.dumps(d, indent=1, sort_keys=True)


def validate(cfg: Config) -> None:
    problems = []
    if cfg.image_size < 16 or cfg.image_size % 16:
        problems.append("image_size must be a positive multiple of 16")
    if len(cfg.channels) != 3 or min(cfg.channels) < 1:
        problems.append("channels needs three positive entries")
    if not 1 <= cfg.levels <= 3:
        problems.append("levels must be 1, 2 or 3")
    if cfg.feature_mode not in ("conv", "patch"):
        problems.append("feature_mode must be conv or patch")
    if cfg.flow_mode not in ("argmax", "soft_argmax"):
        problems.append("flow_mode must be argmax or soft_argmax")
    if cfg.tau < 0:
        problems.append("tau must be non-negative")
    if cfg.temperature is not None and cfg.temperature <= 0:
        problems.append("temperature must be positive")
    if not 0 <= cfg.agg_mix <= 1:
        problems.append("agg_mix must lie in [0, 1]")
    if cfg.samples < 2 or cfg.rays < 1:
        problems.append("samples >= 2 and rays >= 1 required")
    if not 0 < cfg.near < cfg.far:
        problems.append("need 0 < near < far")
    if cfg.lambda_tri < 0 or cfg.huber_delta <= 0:
        problems.append("lambda_tri >= 0 and huber_delta > 0 required")
    if not 0 < cfg.small_max < cfg.large_min <= 1:
        problems.append("need 0 < small_max < large_min <= 1")
    if cfg.overlap_stride not in (1, 2, 4, 8, 16):
        problems.append("overlap_stride must be a power of two up to 16")
    if cfg.jobs < 1:
        problems.append("jobs must be >= 1")
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))


def load_config(path=None) -> Config:
    """Defaults, overridden by ``path`` or else by the file named in ``$COPONERF_CONFIG``."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return Config()
    raw = json.loads(Path(path).read_text())
    known = {f.name for f in fields(Config)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return Config(**raw)
