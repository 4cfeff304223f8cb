"""Composed run configuration: model + data + train, with JSON round-tripping,
dotted-key overrides, and cross-section consistency checks.

Unknown keys are rejected everywhere so a typo in a config file or an override
fails loudly instead of silently running the defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .errors import ValidationError
from .motionvae import ModelConfig
from .objectives import LossWeights
from .synthdata import DataConfig
from .trainer import TrainConfig, config_hash


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def default_config() -> Config:
    return Config()


def validate_config(cfg: Config) -> Config:
    """Cross-section checks that single dataclasses cannot see."""
    if cfg.model.global_dim != cfg.data.global_dim or cfg.model.local_dim != cfg.data.local_dim:
        raise ValidationError(
            "model and data feature dims disagree: "
            f"model ({cfg.model.global_dim}, {cfg.model.local_dim}) vs "
            f"data ({cfg.data.global_dim}, {cfg.data.local_dim})"
        )
    if cfg.train.seq_len != cfg.data.seq_len:
        raise ValidationError(
            f"train.seq_len={cfg.train.seq_len} but data.seq_len={cfg.data.seq_len}"
        )
    return cfg


# ---------------------------------------------------------------------------
# dict / file round-tripping


def _to_dict(obj):
    if is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_dict(v) for v in obj]
    return obj


def config_to_dict(cfg: Config) -> dict:
    return _to_dict(cfg)


def _from_dict(cls, doc, path=""):
    if not isinstance(doc, dict):
        raise ValidationError(f"config section {path or cls.__name__} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ValidationError(f"unknown config keys under {path or 'root'}: {unknown}")
    kwargs = {}
    for name, value in doc.items():
        f = known[name]
        nested = f.type if isinstance(f.type, type) else None
        if nested is None and isinstance(f.default_factory, type) and is_dataclass(f.default_factory):
            nested = f.default_factory
        if nested is not None and is_dataclass(nested):
            kwargs[name] = _from_dict(nested, value, f"{path}{name}.")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_SECTIONS = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig}


def config_from_dict(doc: dict) -> Config:
    unknown = sorted(set(doc) - set(_SECTIONS))
    if unknown:
        raise ValidationError(f"unknown config sections: {unknown}")
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _from_dict(cls, doc.get(name, {}), f"{name}.")
    return Config(**sections)


def load_config(path) -> Config:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {path} is not valid JSON: {e}") from e
    return config_from_dict(doc)


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# overrides


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply `section.key=value` (or deeper) overrides; values parse as JSON, else string."""
    doc = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ValidationError(f"unknown config path {dotted!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ValidationError(f"unknown config key {dotted!r}")
        node[keys[-1]] = value
    return config_from_dict(doc)


__all__ = [
    "Config",
    "ModelConfig",
    "DataConfig",
    "TrainConfig",
    "LossWeights",
    "default_config",
    "validate_config",
    "config_to_dict",
    "config_from_dict",
    "load_config",
    "save_config",
    "apply_overrides",
    "config_hash",
]
