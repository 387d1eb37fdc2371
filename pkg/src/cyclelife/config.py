"""Pipeline configuration: INI-style key=value files with strict validation.

Unknown sections or keys are rejected, and every stage that draws random
numbers must carry an explicit integer seed (there is no wall-clock
entropy anywhere in the pipeline).
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

CONFIG_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration file or missing required setting."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


@dataclass
class RunSection:
    out_dir: str = "runs/out"
    threads: int = 1


@dataclass
class IngestSection:
    manifest: str = ""
    data_dir: str = ""
    out: str = ""
    seed: Optional[int] = None
    dod_boundary: float = 0.40
    train_fraction_high_dod: float = 116.0 / 176.0


@dataclass
class CurvesSection:
    infile: str = ""
    out: str = ""
    grid_points: int = 1000
    smoothing: Optional[float] = None
    dump_csv: str = ""


@dataclass
class FeaturesSection:
    infile: str = ""
    out: str = ""
    weeks: str = "3,0"
    search_window: bool = True
    windows_audit: str = ""


@dataclass
class SelectSection:
    features: str = ""
    splits: str = ""
    k: int = 5
    repeats: int = 5
    max_features: int = 10
    seed: Optional[int] = None
    out: str = ""


@dataclass
class TrainSection:
    features: str = ""
    select: str = ""
    n_features: int = 2
    seed: Optional[int] = None
    out_dir: str = ""
    alphas: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(11))
    lambdas: tuple[float, ...] = ()
    cv_k: int = 5
    cv_repeats: int = 3


@dataclass
class HbmSection:
    features: str = ""
    cluster_feature: str = "stress.avg"
    k: int = 4
    min_cluster_size: int = 8
    max_cluster_size: Optional[int] = None
    cell_features: str = "auto"
    seed: Optional[int] = None
    out: str = ""
    summary: str = ""
    chains: int = 4
    draws: int = 20_000
    warmup: int = 10_000
    thin: int = 5
    restarts: int = 8


@dataclass
class EvaluateSection:
    fits: str = ""
    splits: str = ""
    features: str = ""
    out: str = ""


@dataclass
class SweepSection:
    infile: str = ""
    pairs: str = "0:1,0:2,0:3"
    out: str = ""
    seed: Optional[int] = None


@dataclass
class SynthSection:
    out_dir: str = ""
    seed: Optional[int] = None
    n_groups: int = 16
    cells_per_group: int = 4
    noise: float = 1.0
    min_rpt_weeks: int = 4
    half_week_min_group: Optional[int] = None


@dataclass
class PipelineConfig:
    run: RunSection = field(default_factory=RunSection)
    ingest: IngestSection = field(default_factory=IngestSection)
    curves: CurvesSection = field(default_factory=CurvesSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    select: SelectSection = field(default_factory=SelectSection)
    train: TrainSection = field(default_factory=TrainSection)
    hbm: HbmSection = field(default_factory=HbmSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    synth: SynthSection = field(default_factory=SynthSection)


# "in" is a Python keyword, so those dataclass fields are named infile.
_KEY_ALIASES = {"in": "infile", "max": "max_features"}

_OPTIONAL_INT_FIELDS = {"seed", "half_week_min_group", "max_cluster_size"}
_OPTIONAL_FLOAT_FIELDS = {"smoothing"}


def _coerce(section: str, key: str, raw: str, default) -> object:
    if key in _OPTIONAL_INT_FIELDS:
        return int(raw)
    if key in _OPTIONAL_FLOAT_FIELDS:
        return float(raw)
    if isinstance(default, bool):
        return _parse_bool(raw)
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return _parse_floats(raw)
    if isinstance(default, str) or default is None:
        return raw
    raise ConfigError(f"[{section}] {key}: unsupported type")


def load_config(path: Path | str) -> PipelineConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(str(path))
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg = PipelineConfig()
    known_sections = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(f"unknown config section [{section}]")
        target = known_sections[section]
        valid = {f.name for f in fields(target)}
        for key, raw in parser.items(section):
            attr = _KEY_ALIASES.get(key, key)
            if attr not in valid:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            current = getattr(target, attr)
            setattr(target, attr, _coerce(section, attr, raw, current))
    return cfg


def require_seed(value: Optional[int], stage: str) -> int:
    if value is None:
        raise ConfigError(f"stage {stage!r} needs an explicit seed (none configured)")
    return int(value)


def config_hash(cfg: PipelineConfig) -> str:
    def enc(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {f.name: enc(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        return obj

    blob = json.dumps(enc(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def section_hash(section) -> str:
    blob = json.dumps(
        {f.name: str(getattr(section, f.name)) for f in fields(section)}, sort_keys=True
    ).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
