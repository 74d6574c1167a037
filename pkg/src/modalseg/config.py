"""Experiment configuration: defaults < JSON file < command-line flags."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .model import ModelConfig, SGMConfig


class ConfigError(ValueError):
    pass


@dataclass
class Schedule:
    steps: int = 2000
    lr: float = 6e-5
    warmup_fraction: float = 0.05
    poly_power: float = 0.9
    batch_size: int = 4
    weight_decay: float = 0.01
    ckpt_every: int = 500


@dataclass
class DataConfig:
    train_samples: int = 64
    val_samples: int = 16
    height: int = 64
    width: int = 64


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(sgm=SGMConfig(enabled=False)))
    schedule: Schedule = field(default_factory=Schedule)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    profile: str = "train"
    threads: int = 1

    def validate(self) -> None:
        s = self.schedule
        if s.steps < 0 or s.batch_size < 1 or s.lr <= 0 or s.ckpt_every < 1:
            raise ConfigError("schedule needs steps >= 0, batch_size >= 1, lr > 0, ckpt_every >= 1")
        if not 0 <= s.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        if self.profile not in ("train", "test"):
            raise ConfigError("profile must be 'train' or 'test'")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.data.height % 32 or self.data.width % 32:
            raise ConfigError("input extents must be divisible by 32")

    def provenance(self) -> dict:
        """The switch set that identifies an ablation row."""
        m = self.model
        return {
            "sq_hub_mode": m.sq_hub_mode,
            "cross_attention": "on" if m.cross_attention else "off",
            "residual_add": "on" if m.residual_add else "off",
            "sgm": "on" if m.sgm.enabled else "off",
            "sgm.lambda": m.sgm.lam,
            "sgm.pairing": m.sgm.pairing_mode,
            "prototype": "on" if m.sgm.prototype else "off",
            "sgm.kl_axis": m.sgm.kl_axis,
            "seed": self.seed,
        }

    def to_dict(self) -> dict:
        return {**asdict(self), "model": self.model.to_dict()}


LAMBDA_SWEEP = (1.0, 40.0, 60.0, 80.0)

_SGM_ON = {"enabled": True, "lam": 60.0}

# Named switch sets; each reproduces one ablation row by configuration alone.
PRESETS = {
    "baseline": {},
    "sgm": {"model": {"sgm": dict(_SGM_ON)}},
    "mean_hub": {"model": {"sq_hub_mode": "mean"}},
    "no_cross_attention": {"model": {"cross_attention": False}},
    "no_add": {"model": {"residual_add": False}},
    "no_prototype": {"model": {"sgm": {**_SGM_ON, "prototype": False}}},
    "cosine_pairing": {"model": {"sgm": {**_SGM_ON, "pairing_mode": "cosine"}}},
    **{f"sgm_lambda_{lam:g}": {"model": {"sgm": {"enabled": True, "lam": lam}}} for lam in LAMBDA_SWEEP},
}


def _deep_update(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_update(out[key], value)
        else:
            out[key] = value
    return out


def _merge(target, updates: dict, path: str = "") -> None:
    known = {f.name: f for f in fields(target)}
    for key, value in updates.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path}{key}")
        current = getattr(target, key)
        if hasattr(current, "__dataclass_fields__") and isinstance(value, dict):
            _merge(current, value, f"{path}{key}.")
        else:
            setattr(target, key, value)


def from_dict(data: dict) -> ExperimentConfig:
    cfg = ExperimentConfig()
    try:
        _merge(cfg, data)
        cfg.model = ModelConfig(**asdict(cfg.model))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    return cfg


def load(path=None, overrides: dict | None = None, preset: str | None = None) -> ExperimentConfig:
    """Resolve a config: defaults < preset < JSON file < dotted-key overrides."""
    data: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _deep_update(data, PRESETS[preset])
    if path is not None:
        try:
            data = _deep_update(data, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return from_dict(data)
