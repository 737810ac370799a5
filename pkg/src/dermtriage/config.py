"""TOML run configuration with six sections: data, train, mc, thresholds, synth, qc.

Every key has a default, so an empty file is a valid configuration. Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class DataSection:
    manifest: str = ""
    embeddings: str = ""
    # calibration-lab data for finetune
    calibration_manifest: str = ""
    calibration_embeddings: str = ""
    model: str = ""
    lab_id: str = "ref"


@dataclass(frozen=True)
class TrainSection:
    width: int = 1024
    attention_dim: int = 0  # 0 means width / 4
    dropout: float = 0.5
    lr: float = 1e-4
    max_epochs: int = 100
    patience: int = 10
    accumulate: int = 1
    class_weighted: bool = False
    seed: int = 0
    finetune_train: int = 210
    finetune_val: int = 45
    ablation_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class MCSection:
    passes: int = 100
    seed: int = 0


@dataclass(frozen=True)
class ThresholdSection:
    accuracy: float = 0.90
    ppv: float = 0.60
    # optional per-class overrides of ``accuracy``
    per_class: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SynthSection:
    dim: int = 128
    per_class: int = 200
    delta: float = 0.6
    sigma: float = 0.5
    fractions: Tuple[float, ...] = (0.7, 0.15, 0.15)
    n_tiles: Tuple[int, ...] = (20, 200)
    diagnostic_fraction: Tuple[float, ...] = (0.05, 0.4)
    kernel_low: float = 0.80
    kernel_int: float = 0.75
    kernel_high: float = 0.85
    kernel_other: float = 0.95
    adjacent_share: float = 0.8
    consensus: bool = False
    shift_mix: float = 0.0
    shift_offset: float = 0.0
    shift_scale: float = 1.0
    seed: int = 7


@dataclass(frozen=True)
class QCSection:
    slides: str = ""
    blur_threshold: float = -1.0  # negative means calibrate from the slides
    blur_percentile: float = 1.0
    ink_model: str = ""
    ink_cutoff: float = 0.5
    min_tissue: float = 0.25
    embed_dim: int = 1024
    embed_pool: int = 4
    embed_seed: int = 0


@dataclass(frozen=True)
class Config:
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    mc: MCSection = field(default_factory=MCSection)
    thresholds: ThresholdSection = field(default_factory=ThresholdSection)
    synth: SynthSection = field(default_factory=SynthSection)
    qc: QCSection = field(default_factory=QCSection)


def _coerce(section: str, key: str, default, value):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be an array")
        kind = type(default[0]) if default else float
        return tuple(_coerce(section, key, kind(0), v) for v in value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where} must be a table")
        return {str(k): _coerce(section, f"{key}.{k}", 0.0, v) for k, v in value.items()}
    raise ConfigError(f"{where}: unsupported type")


def config_from_dict(raw: dict) -> Config:
    sections = {}
    known = {f.name: f for f in dataclasses.fields(Config)}
    for name, table in raw.items():
        if name not in known:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        cls = known[name].default_factory
        defaults = cls()
        valid = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for key, value in table.items():
            if key not in valid:
                raise ConfigError(f"unknown key [{name}] {key}")
            values[key] = _coerce(name, key, getattr(defaults, key), value)
        sections[name] = cls(**values)
    return Config(**sections)


def load_config(path) -> Config:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


def resolve(config_path, value: str) -> Path:
    """Paths in a config are relative to the config file's directory."""
    p = Path(value)
    return p if p.is_absolute() else Path(config_path).parent / p
