"""Run configuration: JSON file, defaults and command-line overrides.

Precedence is flags > file > defaults. Unknown keys are rejected with the
line they appear on.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .architectures import BACKBONES
from .errors import ConfigError, TrainingError
from .trainer import SCENARIOS, TrainConfig

OUTPUT_ROOT_ENV = "UROLESION_OUTPUT_ROOT"
RESOLVED_NAME = "config.resolved.json"


@dataclass(frozen=True)
class DataConfig:
    dir: str | None = None  # dataset directory holding manifest.csv; generated when None
    composition: str = "uniform"  # "uniform" (per_cell frames per cell) or "table" (scaled clinical counts)
    per_cell: int = 60
    table_divisor: float = 20.0
    resolution: int = 64
    seed: int = 0
    patients_per_procedure: int = 3


@dataclass(frozen=True)
class NetworkConfig:
    archs: tuple[str, ...] = BACKBONES
    width_scale: float = 0.25
    inception_variant: str = "classic"
    dtype: str = "float32"


@dataclass(frozen=True)
class RunConfig:
    output_dir: str = "urolesion-out"
    jobs: int = 1
    scenarios: tuple[int, ...] = (1, 2, 3)
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scenarios"] = list(self.scenarios)
        d["network"]["archs"] = list(self.network.archs)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def output_path(self) -> Path:
        return resolve_output(self.output_dir)


SECTIONS = {"data": DataConfig, "network": NetworkConfig, "train": TrainConfig}


def resolve_output(path: str | os.PathLike) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _coerce(value: Any, default: Any, key: str, text: str | None):
    line = _line_of(text, key)
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        ok = isinstance(value, list)
        value = tuple(value) if ok else value
    elif isinstance(default, str) or default is None:
        ok = value is None or isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {type(value).__name__}", line)
    return value


def _section(cls, raw: Any, name: str, text: str | None, base):
    if not isinstance(raw, Mapping):
        raise ConfigError(f"{name} must be an object", _line_of(text, name))
    known = {f.name for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"unknown key {name}.{k}", _line_of(text, k))
    vals = {k: _coerce(v, getattr(base, k), k, text) for k, v in raw.items()}
    try:
        return replace(base, **vals)
    except (TrainingError, TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}", _line_of(text, name)) from None


def from_dict(raw: Mapping, text: str | None = None, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    top = {f.name for f in fields(RunConfig)}
    for k in raw:
        if k not in top:
            raise ConfigError(f"unknown key {k}", _line_of(text, k))
    vals = {}
    for k, v in raw.items():
        if k in SECTIONS:
            vals[k] = _section(SECTIONS[k], v, k, text, getattr(base, k))
        else:
            vals[k] = _coerce(v, getattr(base, k), k, text)
    cfg = replace(base, **vals)
    validate(cfg, text)
    return cfg


def validate(cfg: RunConfig, text: str | None = None) -> None:
    for a in cfg.network.archs:
        if a not in BACKBONES:
            raise ConfigError(f"unknown architecture {a!r} (choose from {', '.join(BACKBONES)})",
                              _line_of(text, "archs"))
    for s in cfg.scenarios:
        if s not in SCENARIOS:
            raise ConfigError(f"unknown scenario {s!r}", _line_of(text, "scenarios"))
    if cfg.data.composition not in ("uniform", "table"):
        raise ConfigError("data.composition must be 'uniform' or 'table'", _line_of(text, "composition"))
    if cfg.jobs < 1:
        raise ConfigError("jobs must be at least 1", _line_of(text, "jobs"))
    if cfg.network.width_scale <= 0:
        raise ConfigError("network.width_scale must be positive", _line_of(text, "width_scale"))


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, exc.lineno) from None
    if not isinstance(raw, Mapping):
        raise ConfigError("top level must be an object", 1)
    return from_dict(raw, text, base)


def load(path: str | os.PathLike | None, base: RunConfig | None = None) -> RunConfig:
    if path is None:
        return base or RunConfig()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    return loads(p.read_text(encoding="utf-8"), base)


def override(cfg: RunConfig, **flags) -> RunConfig:
    """Apply command-line values given as dotted keys (``train.seed=3``); ``None`` means unset."""
    nested: dict[str, Any] = {}
    for key, value in flags.items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if name:
            nested.setdefault(section, {})[name] = value
        else:
            nested[section] = value
    return from_dict(json.loads(json.dumps(nested)), None, cfg)


def write_resolved(cfg: RunConfig, directory: str | os.PathLike) -> Path:
    p = Path(directory) / RESOLVED_NAME
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(cfg.to_json(), encoding="utf-8")
    return p
