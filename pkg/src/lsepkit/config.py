"""Experiment configuration: YAML files with a ``preset`` include, validated into dataclasses.

Schema (all sections optional except ``data.path`` for training)::

    preset: tiny            # B | L | XL | tiny
    seed: 0
    probe_seed: null        # seeds the probe-label and crop streams; defaults to seed
    output_dir: runs/tiny
    model:     {input_channels, input_size, patch_size, depth, hidden_dim, num_heads, num_classes, target_depth}
    probe:     {rho_L, crop_min, crop_max, omega_start, omega_end, bins, probe_lr, random_other_label}
    repa:      {enabled, lam, provider: desk|file, feature_file, align_depth, head_width, head_depth, encoder_epochs}
    optimizer: {lr, beta1, beta2, weight_decay}
    train:     {batch_size, total_steps, rho_D, lsep, ema_decay, deterministic, log_every, ckpt_every, prefetch, schedule}
    data:      {path, image_size, channels}

``probe.target_depth`` always mirrors ``model.target_depth``.
Environment overrides: LSEPKIT_OUTPUT_DIR (output directory), LSEPKIT_DEVICE (torch device).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ValidationError
from .lsep import ProbePolicy
from .trunk import PRESETS as MODEL_PRESETS
from .trunk import ModelConfig


@dataclass(frozen=True)
class RepaConfig:
    enabled: bool = False
    lam: float = 0.5
    provider: str = "desk"
    feature_file: str | None = None
    align_depth: int | None = None
    head_width: int = 512
    head_depth: int = 3
    encoder_epochs: int = 5


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    total_steps: int = 400_000
    rho_D: float = 0.1
    lsep: bool = True
    ema_decay: float = 0.9999
    deterministic: bool = True
    log_every: int = 100
    ckpt_every: int = 10_000
    prefetch: int = 2
    schedule: str = "linear"


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    image_size: int = 32
    channels: int = 3


# Fields that control how long/where a run goes but not what it computes.
RUN_CONTROL = {"output_dir": None, "train": {"total_steps", "log_every", "ckpt_every", "prefetch"}}


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    probe: ProbePolicy = field(default_factory=ProbePolicy)
    repa: RepaConfig = field(default_factory=RepaConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    probe_seed: int | None = None
    output_dir: str = "runs/default"
    preset: str | None = None

    def __post_init__(self):
        if self.probe.target_depth != self.model.target_depth:
            raise ValidationError("probe.target_depth must equal model.target_depth")
        self.probe.validate_for_grid(self.model.grid_side)
        if self.model.input_channels != self.data.channels or self.model.input_size != self.data.image_size:
            raise ValidationError("model input shape must match data.channels / data.image_size")
        t = self.train
        if t.batch_size < 1 or t.total_steps < 0 or not 0.0 <= t.rho_D <= 1.0:
            raise ValidationError("invalid train section")
        if not 0.0 <= t.ema_decay <= 1.0:
            raise ValidationError("ema_decay must lie in [0, 1]")
        if self.repa.enabled and self.repa.provider not in ("desk", "file"):
            raise ValidationError("repa.provider must be 'desk' or 'file'")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        d = self.to_dict()
        for key, sub in RUN_CONTROL.items():
            if sub is None:
                d.pop(key, None)
            else:
                for s in sub:
                    d[key].pop(s, None)
        d.pop("preset", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def stream_seed_probe(self) -> int:
        return self.seed if self.probe_seed is None else self.probe_seed


def _probe_preset(model: ModelConfig, **kw) -> dict:
    return {"target_depth": model.target_depth, **kw}


PRESET_DICTS = {
    "B": {
        "model": asdict(MODEL_PRESETS["B"]),
        "probe": _probe_preset(MODEL_PRESETS["B"], rho_L=0.9, crop_min=14, crop_max=16, omega_start=0.005,
                               omega_end=0.01, bins=10, probe_lr=0.03),
        "train": {"batch_size": 256, "total_steps": 400_000},
        "data": {"image_size": 32, "channels": 4},
    },
    "L": {
        "model": asdict(MODEL_PRESETS["L"]),
        "probe": _probe_preset(MODEL_PRESETS["L"], rho_L=0.9, crop_min=12, crop_max=16, omega_start=0.0275,
                               omega_end=0.0325, bins=10, probe_lr=1e-4),
        "train": {"batch_size": 256, "total_steps": 400_000},
        "data": {"image_size": 32, "channels": 4},
    },
    "XL": {
        "model": asdict(MODEL_PRESETS["XL"]),
        "probe": _probe_preset(MODEL_PRESETS["XL"], rho_L=0.9, crop_min=12, crop_max=16, omega_start=0.0225,
                               omega_end=0.03, bins=10, probe_lr=1e-4),
        "train": {"batch_size": 256, "total_steps": 400_000},
        "data": {"image_size": 32, "channels": 4},
    },
    "tiny": {
        "model": asdict(MODEL_PRESETS["tiny"]),
        # 8x8 token grid; crops [6, 8] keep the L/XL ratio of [12, 16] on 16x16.
        "probe": _probe_preset(MODEL_PRESETS["tiny"], rho_L=0.9, crop_min=6, crop_max=8, omega_start=0.0275,
                               omega_end=0.0325, bins=10, probe_lr=0.03),
        "optimizer": {"lr": 2e-4},
        "train": {"batch_size": 64, "total_steps": 20_000, "ema_decay": 0.999, "log_every": 50,
                  "ckpt_every": 2_000},
        "data": {"image_size": 32, "channels": 3},
        "output_dir": "runs/tiny",
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build(cls, values: dict | None, section: str):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValidationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**values)


def config_from_dict(raw: dict, check_files: bool = True) -> ExperimentConfig:
    raw = dict(raw or {})
    name = raw.get("preset")
    if name is not None:
        if name not in PRESET_DICTS:
            raise ValidationError(f"unknown preset {name!r}; available: {sorted(PRESET_DICTS)}")
        raw = deep_merge(PRESET_DICTS[name], raw)
    allowed = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - allowed
    if unknown:
        raise ValidationError(f"unknown top-level config keys: {sorted(unknown)}")
    model = _build(ModelConfig, raw.get("model"), "model")
    probe_raw = dict(raw.get("probe") or {})
    probe_raw.setdefault("target_depth", model.target_depth)
    if probe_raw["target_depth"] != model.target_depth:
        raise ValidationError("probe.target_depth must equal model.target_depth")
    data = _build(DataConfig, raw.get("data"), "data")
    cfg = ExperimentConfig(
        model=model,
        probe=_build(ProbePolicy, probe_raw, "probe"),
        repa=_build(RepaConfig, raw.get("repa"), "repa"),
        optimizer=_build(OptimizerConfig, raw.get("optimizer"), "optimizer"),
        train=_build(TrainConfig, raw.get("train"), "train"),
        data=data,
        seed=int(raw.get("seed", 0)),
        probe_seed=raw.get("probe_seed"),
        output_dir=os.environ.get("LSEPKIT_OUTPUT_DIR", raw.get("output_dir", "runs/default")),
        preset=name,
    )
    if check_files:
        if cfg.data.path is not None and not Path(cfg.data.path).exists():
            raise ValidationError(f"data.path {cfg.data.path} does not exist")
        if cfg.repa.enabled and cfg.repa.provider == "file":
            if not cfg.repa.feature_file or not Path(cfg.repa.feature_file).exists():
                raise ValidationError(f"repa.feature_file {cfg.repa.feature_file} does not exist")
    return cfg


def load_config(path, overrides: dict | None = None, check_files: bool = True) -> ExperimentConfig:
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    base = Path(path).parent
    for section, key in (("data", "path"), ("repa", "feature_file")):
        value = (raw.get(section) or {}).get(key)
        if value and not Path(value).is_absolute():
            raw[section][key] = str((base / value).resolve())
    if overrides:
        raw = deep_merge(raw, overrides)
    return config_from_dict(raw, check_files=check_files)


def dump_config(cfg: ExperimentConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)


def device() -> str:
    return os.environ.get("LSEPKIT_DEVICE", "cpu")
