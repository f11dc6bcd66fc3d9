"""TOML run configuration with ``[model]``, ``[train]`` and ``[data]`` tables.

Top-level keys are also accepted and routed to whichever table declares a
field of that name.
"""
from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from spgm.data import SynthSpec
from spgm.layers import ConfigError
from spgm.separator import ModelConfig
from spgm.training import TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SynthSpec}


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def split_config(raw: dict) -> dict[str, dict]:
    out = {name: {} for name in SECTIONS}
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            out[key].update(value)
            continue
        owners = [name for name, cls in SECTIONS.items() if key in _fields(cls)]
        if not owners:
            raise ConfigError(f"unknown config key {key!r}")
        if len(owners) > 1:
            raise ConfigError(f"ambiguous key {key!r}; put it under one of {owners}")
        out[owners[0]][key] = value
    return out


def load_config(path) -> dict[str, dict]:
    """Parse ``path`` into per-section dicts (missing file sections are empty)."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return split_config(raw)


def model_config(sections: dict[str, dict], **overrides) -> ModelConfig:
    return ModelConfig.from_dict({**sections.get("model", {}), **overrides})


def train_config(sections: dict[str, dict], **overrides) -> TrainConfig:
    return TrainConfig.from_dict({**sections.get("train", {}), **overrides})


def synth_spec(sections: dict[str, dict], **overrides) -> SynthSpec:
    d = {**sections.get("data", {}), **overrides}
    unknown = set(d) - _fields(SynthSpec)
    if unknown:
        raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
    for key in ("f0_a", "f0_b", "am_rate", "snr_db"):
        if key in d:
            d[key] = tuple(d[key])
    return SynthSpec(**d)


def empty_sections() -> dict[str, dict]:
    return {name: {} for name in SECTIONS}


def maybe_load(path) -> dict[str, dict]:
    return load_config(Path(path)) if path else empty_sections()
