"""Run configuration: every module config plus paths, workers and seed, as one TOML document.

Layout::

    schema_version = 1

    [run]       # paths, passes, workers, master_seed, max_failure_fraction
    [augment]   # AugmentConfig
    [motion]    # MotionParams
    [rms]       # RmsConfig
    [bins]      # BinSpec
    [pretrain]  # TrainConfig
    [transfer]  # TrainConfig
    [scratch]   # TrainConfig

Optional fields that are unset are written as the string ``"none"``.
Unknown sections or keys are errors, and so is any other schema version.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .augment import AugmentConfig
from .kspace import MotionParams
from .labels import BinSpec, RmsConfig
from .probe.train import PAPER_PRETRAIN, PAPER_SCRATCH, PAPER_TRANSFER, TrainConfig

SCHEMA_VERSION = 1
NONE = "none"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunSettings:
    manifest: Optional[str] = None
    out_dir: Optional[str] = None
    passes: int = 300
    workers: int = 1
    master_seed: int = 0
    max_failure_fraction: float = 0.05

    def __post_init__(self):
        if self.passes < 1 or self.workers < 1:
            raise ValueError("passes and workers must be >= 1")
        if not 0 <= self.max_failure_fraction <= 1:
            raise ValueError("max_failure_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    motion: MotionParams = field(default_factory=MotionParams)
    rms: RmsConfig = field(default_factory=RmsConfig)
    bins: BinSpec = field(default_factory=BinSpec)
    pretrain: TrainConfig = PAPER_PRETRAIN
    transfer: TrainConfig = PAPER_TRANSFER
    scratch: TrainConfig = PAPER_SCRATCH


def _section_types() -> dict[str, type]:
    return {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}


def _to_toml_value(v):
    if v is None:
        return NONE
    if isinstance(v, tuple):
        return [_to_toml_value(x) for x in v]
    return v


def _from_toml_value(v, default):
    if v == NONE:
        return None
    if isinstance(v, list):
        return tuple(v)
    if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
        return float(v)
    return v


def to_dict(cfg: RunConfig) -> dict[str, Any]:
    out: dict[str, Any] = {"schema_version": SCHEMA_VERSION}
    for name in _section_types():
        out[name] = {k: _to_toml_value(v) for k, v in asdict(getattr(cfg, name)).items()}
    return out


def from_dict(doc: dict[str, Any]) -> RunConfig:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    types = _section_types()
    unknown = set(doc) - set(types) - {"schema_version"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    base = RunConfig()
    sections = {}
    for name, cls in types.items():
        given = doc.get(name, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{name}] must be a table")
        default = getattr(base, name)
        known = {f.name for f in fields(cls)}
        bad = set(given) - known
        if bad:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
        kwargs = {k: _from_toml_value(v, getattr(default, k)) for k, v in given.items()}
        try:
            sections[name] = replace(default, **kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return RunConfig(**sections)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(doc)


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
