"""Run configuration: YAML files, dotted overrides, and seed derivation.

A config file holds up to four sections (``features``, ``model``,
``train``, ``sweep``); unknown sections or keys are rejected.  Every
subcommand writes its fully resolved configuration, including the master
seed, into its output directory so runs can be reproduced.
"""

from __future__ import annotations

import hashlib
from dataclasses import fields
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .features import MelParams
from .model import ModelConfig
from .trainer import TrainConfig

_FEATURE_KEYS = {f.name for f in fields(MelParams)} | {"segment_frames"}
_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_SWEEP_KEYS = {"betas", "holdout_fraction", "eval_sample_count"}
_SECTIONS = {
    "features": _FEATURE_KEYS,
    "model": _MODEL_KEYS,
    "train": _TRAIN_KEYS,
    "sweep": _SWEEP_KEYS,
}

DEFAULT_SWEEP = {"betas": [0.5, 1.0, 4.0], "holdout_fraction": 0.25, "eval_sample_count": None}


def derive_seed(master: int, label: str) -> int:
    """Stable named sub-seed so one master seed drives every component."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _validate(config: dict) -> dict:
    if not isinstance(config, dict):
        raise ConfigurationError("config root must be a mapping")
    for section, values in config.items():
        if section not in _SECTIONS:
            raise ConfigurationError(
                f"unknown config section {section!r}; known: {sorted(_SECTIONS)}"
            )
        if not isinstance(values, dict):
            raise ConfigurationError(f"config section {section!r} must be a mapping")
        unknown = set(values) - _SECTIONS[section]
        if unknown:
            raise ConfigurationError(
                f"unknown keys in section {section!r}: {sorted(unknown)}"
            )
    return config


def load_config(path=None) -> dict:
    """Load and validate a YAML config; ``None`` gives an empty skeleton."""
    if path is None:
        return {section: {} for section in _SECTIONS}
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
    config = {section: {} for section in _SECTIONS}
    for section, values in _validate(raw).items():
        config[section].update(values or {})
    return config


def apply_overrides(config: dict, overrides) -> dict:
    """Apply ``section.key=value`` overrides; values parse as YAML scalars."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
        dotted, raw_value = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) != 2:
            raise ConfigurationError(f"override key {dotted!r} must be section.key")
        section, key = parts
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        if key not in _SECTIONS[section]:
            raise ConfigurationError(f"unknown key {key!r} in section {section!r}")
        try:
            value = yaml.safe_load(raw_value)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"override {item!r}: unparseable value") from exc
        config[section][key] = value
    return config


def _coerce(section: dict, cls, **extra):
    values = dict(section)
    values.update(extra)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad {cls.__name__} settings: {exc}") from exc


def make_mel_params(config: dict) -> MelParams:
    values = {k: v for k, v in config.get("features", {}).items() if k != "segment_frames"}
    return _coerce(values, MelParams)


def segment_frames(config: dict) -> int:
    value = config.get("features", {}).get("segment_frames", 40)
    if int(value) < 1:
        raise ConfigurationError("segment_frames must be at least 1")
    return int(value)


def make_model_config(config: dict) -> ModelConfig:
    values = dict(config.get("model", {}))
    if "groups_per_scale" in values:
        values["groups_per_scale"] = tuple(values["groups_per_scale"])
    return _coerce(values, ModelConfig)


def make_train_config(config: dict, seed: int | None = None) -> TrainConfig:
    extra = {} if seed is None else {"seed": seed}
    values = dict(config.get("train", {}))
    values.update(extra)
    return _coerce(values, TrainConfig)


def sweep_settings(config: dict) -> dict:
    values = dict(DEFAULT_SWEEP)
    values.update(config.get("sweep", {}))
    return values


def write_resolved(config: dict, seed: int, out_dir, command: str) -> Path:
    """Persist the resolved configuration next to a run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {"command": command, "seed": seed}
    resolved.update({k: v for k, v in config.items() if v})
    path = out_dir / "resolved.yaml"
    path.write_text(yaml.safe_dump(resolved, sort_keys=True), encoding="utf-8")
    return path
