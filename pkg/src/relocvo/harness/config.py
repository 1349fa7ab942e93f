"""Flat ``section.field=value`` configuration over the run dataclasses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from ..fusion import FusionConfig
from ..odometry import OdometryConfig
from ..reloc import RelocConfig
from .pipeline import FRONT_AND_BACK_END, PipelineConfig
from .world import SequenceSpec


@dataclass
class RunSettings:
    world_seed: int = 0
    seed: int = -1  # noise seed; -1 reuses the world seed
    mode: str = FRONT_AND_BACK_END
    fusion: bool = True


@dataclass
class EvalSettings:
    interval: int = 7
    alignment: str = "sim3"


@dataclass
class Config:
    run: RunSettings = field(default_factory=RunSettings)
    sequence: SequenceSpec = field(default_factory=SequenceSpec)
    odometry: OdometryConfig = field(default_factory=OdometryConfig)
    reloc: RelocConfig = field(default_factory=RelocConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    @property
    def noise_seed(self):
        return self.run.world_seed if self.run.seed < 0 else self.run.seed

    def pipeline(self):
        return PipelineConfig(self.run.mode, self.run.fusion, self.odometry, self.reloc, self.fusion)


def _coerce(text, default, key):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) and "," not in text:
            return float(text)
        if isinstance(default, str) or default is None:
            return text
        # scalar-or-vector numeric fields
        vals = [float(v) for v in text.split(",")]
        return vals[0] if len(vals) == 1 else vals
    except ValueError:
        raise ConfigurationError(f"{key}: cannot read {text!r} as {type(default).__name__}") from None


def _assign(obj, path, text, key):
    name = path[0]
    names = {f.name for f in dataclasses.fields(obj)}
    if name not in names or name.startswith("_"):
        raise ConfigurationError(f"unknown configuration key {key!r}")
    current = getattr(obj, name)
    if dataclasses.is_dataclass(current):
        if len(path) == 1:
            raise ConfigurationError(f"{key} is a section, not a value")
        return dataclasses.replace(obj, **{name: _assign(current, path[1:], text, key)})
    if len(path) != 1:
        raise ConfigurationError(f"unknown configuration key {key!r}")
    return dataclasses.replace(obj, **{name: _coerce(text, current, key)})


def parse_pairs(lines):
    """``key=value`` lines (``#`` comments, blank lines ignored) -> ordered dict."""
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {n}: expected key=value, got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(pairs, base=None):
    """Apply ``{key: text}`` overrides to ``base`` (default: all defaults)."""
    cfg = base or Config()
    for key, text in pairs.items():
        cfg = _assign(cfg, key.split("."), text, key)
    return cfg


def load_config(path=None, overrides=()):
    """Configuration from an optional file plus ``key=value`` override strings."""
    pairs = {}
    if path is not None:
        with open(path) as fh:
            pairs.update(parse_pairs(fh.read().splitlines()))
    pairs.update(parse_pairs(overrides))
    return build_config(pairs)


def _flatten(obj, prefix):
    for f in dataclasses.fields(obj):
        if f.name.startswith("_"):
            continue
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, key + ".")
        elif isinstance(value, bool):
            yield key, "true" if value else "false"
        elif isinstance(value, (list, tuple, np.ndarray)):
            yield key, ",".join(repr(float(v)) for v in np.ravel(value))
        else:
            yield key, repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg):
    """Every resolved setting, one ``key=value`` per line in a stable order."""
    return "".join(f"{k}={v}\n" for k, v in _flatten(cfg, ""))


def write_config(path, cfg):
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))

