"""Run configuration: nested dataclasses addressed by flat dotted keys.

The config file is plain text, one ``key = value`` per line, ``#`` comments.
Keys are listed by ``fsformer config-keys``; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Mapping

from .fedsim import FederationConfig
from .histgan import GanConfig
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    n_vehicles: int = 240
    stream_length: int = 200
    window: int = 20
    stride: int = 10
    jitter: float = 0.05


@dataclass(frozen=True)
class PrivacyConfig:
    noise: float = 0.001
    clip: float = 5.0
    delta: float = 1e-5


def _env_seed() -> int:
    return int(os.environ.get("FSF_SEED", "0"))


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    fed: FederationConfig = field(default_factory=FederationConfig)
    privacy: PrivacyConfig = field(default_factory=PrivacyConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    seed: int = field(default_factory=_env_seed)
    threads: int = 1


SECTIONS = ("data", "model", "train", "fed", "privacy", "gan")


def flatten(cfg: RunConfig) -> dict:
    out = {}
    for sec in SECTIONS:
        for f in dataclasses.fields(getattr(cfg, sec)):
            out[f"{sec}.{f.name}"] = getattr(getattr(cfg, sec), f.name)
    out["seed"] = cfg.seed
    out["threads"] = cfg.threads
    return out


def _coerce(raw, like):
    if not isinstance(raw, str):
        return raw
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, object]) -> RunConfig:
    known = flatten(cfg)
    unknown = sorted(set(overrides) - set(known))
    if unknown:
        raise KeyError(f"unknown config key(s): {', '.join(unknown)}")
    top = {}
    per_section: dict[str, dict] = {}
    for key, raw in overrides.items():
        value = _coerce(raw, known[key])
        if "." in key:
            sec, name = key.split(".", 1)
            per_section.setdefault(sec, {})[name] = value
        else:
            top[key] = value
    for sec, values in per_section.items():
        top[sec] = dataclasses.replace(getattr(cfg, sec), **values)
    return dataclasses.replace(cfg, **top)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key = key.strip()
        if key in out:
            raise ValueError(f"config line {lineno}: duplicate key {key}")
        out[key] = value.strip()
    return out


def load_config(path: str | None = None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    """Defaults, then the config file, then CLI overrides."""
    cfg = RunConfig()
    if path:
        with open(path) as fh:
            cfg = apply_overrides(cfg, parse_config_text(fh.read()))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in flatten(cfg).items())
