"""Training configuration and the flat ``key = value`` config file format.

Keys use dotted names (``loss.tau``, ``hardness.h0``, ...). Unknown keys are
rejected so that typos never silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from ..augment import AugmentConfig, parse_modes
from ..errors import ConfigError
from ..loss import LossConfig, OptState
from ..model import FUSION_MODES
from ..pairing import HARDNESS_MODES, HardnessSchedule
from ..scene import SceneConfig

OBJECTIVES = ("p4contrast", "pointcontrast", "crossmodal")
TRAIN_BRANCHES = ("joint", "separate")


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "p4contrast"
    fusion_mode: str = "hybrid"
    train_branches: str = "joint"
    batch_size: int = 16
    iterations: int = 1000
    seed: int = 0

    augment_mode: str = "jitter"
    augment_sigma_xyz: float = -1.0  # < 0 means 0.02 * extent
    augment_sigma_rgb: float = 0.05
    augment_rot_range: float = float(np.pi)
    augment_scale_min: float = 0.8
    augment_scale_max: float = 1.2
    augment_trans_range: float = 0.2
    augment_image_size: int = 64

    hardness_mode: str = "progressive"
    hardness_h0: float = -1.0  # < 0 means 1 / extent
    hardness_slope: float = -1.0  # < 0 means reach epsilon at 80% of the run
    hardness_epsilon: float = -1.0  # < 0 means 20 / extent

    loss_tau: float = 0.4
    loss_include_positive: bool = False

    opt_base_lr: float = 0.02  # the 0.8 of the large-scale recipe saturates this small normalized encoder
    opt_momentum: float = 0.9
    opt_weight_decay: float = 1e-4
    opt_power: float = 0.9
    opt_total_iters: int = -1  # < 0 means `iterations`

    model_hidden: int = 32
    model_dim: int = 16
    model_knn_k: int = 8

    corpus_seed: int = 0
    corpus_n_train: int = 32
    corpus_n_test: int = 8
    corpus_primitives: int = 4
    corpus_points_per_primitive: int = 256
    corpus_extent: float = 1.0
    corpus_n_classes: int = 8

    probe_steps: int = 500
    probe_lr: float = 0.1
    probe_finetune_encoder: bool = False

    report_collapse_every: int = 250
    report_collapse_samples: int = 512

    # --- derived component configs -------------------------------------------

    def scene_config(self) -> SceneConfig:
        return SceneConfig(self.corpus_primitives, self.corpus_points_per_primitive,
                           self.corpus_extent, self.corpus_n_classes)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(
            sigma_xyz=None if self.augment_sigma_xyz < 0 else self.augment_sigma_xyz,
            sigma_rgb=self.augment_sigma_rgb,
            modes=parse_modes(self.augment_mode),
            rot_range=self.augment_rot_range,
            scale_range=(self.augment_scale_min, self.augment_scale_max),
            trans_range=self.augment_trans_range,
            image_size=self.augment_image_size,
        )

    @property
    def total_iters(self) -> int:
        return self.iterations if self.opt_total_iters < 0 else self.opt_total_iters

    def base_schedule(self) -> HardnessSchedule:
        default = HardnessSchedule.default(self.corpus_extent, self.total_iters)
        h0 = default.h0 if self.hardness_h0 < 0 else self.hardness_h0
        eps = default.epsilon if self.hardness_epsilon < 0 else self.hardness_epsilon
        if self.hardness_slope < 0:
            slope = (eps - h0) / (0.8 * max(self.total_iters, 1))
        else:
            slope = self.hardness_slope
        return HardnessSchedule(h0, slope, eps)

    def schedule(self) -> HardnessSchedule:
        return HardnessSchedule.for_mode(self.hardness_mode, self.base_schedule())

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss_tau, self.loss_include_positive)

    def opt_state(self) -> OptState:
        return OptState(self.total_iters, self.opt_base_lr, self.opt_momentum, self.opt_weight_decay, self.opt_power)

    # --- validation / identity -------------------------------------------------

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.train_branches not in TRAIN_BRANCHES:
            raise ConfigError(f"train_branches must be one of {TRAIN_BRANCHES}")
        if self.objective == "crossmodal" and self.fusion_mode != "late":
            raise ConfigError("the crossmodal objective uses late fusion (set fusion_mode = late)")
        if self.train_branches == "separate" and self.fusion_mode == "early":
            raise ConfigError("separate branch training needs late or hybrid fusion")
        if self.hardness_mode not in HARDNESS_MODES:
            raise ConfigError(f"hardness.mode must be one of {HARDNESS_MODES}")
        if self.batch_size < 2 or self.iterations < 0:
            raise ConfigError("batch_size must be >= 2 and iterations >= 0")
        if self.iterations > self.total_iters:
            raise ConfigError("iterations exceed opt.total_iters")
        if self.corpus_n_train < 1 or self.corpus_n_test < 1:
            raise ConfigError("corpus needs at least one train and one test scene")
        if self.probe_steps < 0 or not self.probe_lr > 0:
            raise ConfigError("probe.steps must be >= 0 and probe.lr > 0")
        if self.report_collapse_every < 1 or self.report_collapse_samples < 2:
            raise ConfigError("report.collapse_every >= 1 and report.collapse_samples >= 2 required")
        self.scene_config().validate()
        self.augment_config().validate()
        base = self.base_schedule()
        if not base.h0 < base.epsilon:
            raise ConfigError("hardness.h0 must be strictly below hardness.epsilon")
        self.schedule()
        self.loss_config()
        self.opt_state()
        for name in ("model_hidden", "model_dim"):
            if getattr(self, name) < 4:
                raise ConfigError(f"{key_of(name)} must be >= 4")
        if self.model_knn_k < 1:
            raise ConfigError("model.knn_k must be >= 1")

    def to_flat(self) -> dict[str, object]:
        return {key_of(f.name): getattr(self, f.name) for f in fields(self)}

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict[str, object]) -> "TrainConfig":
        return replace(self, **{field_of(k): coerce(field_of(k), v) for k, v in overrides.items()})


_PREFIXES = ("augment", "hardness", "loss", "opt", "model", "corpus", "probe", "report")
_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def key_of(field_name: str) -> str:
    head, _, tail = field_name.partition("_")
    return f"{head}.{tail}" if head in _PREFIXES and tail else field_name


def field_of(key: str) -> str:
    name = key.strip().replace(".", "_")
    if name not in _FIELD_TYPES or key_of(name) != key.strip():
        raise ConfigError(f"unknown config key {key!r}")
    return name


def coerce(field_name: str, value):
    kind = _FIELD_TYPES[field_name]
    if not isinstance(value, str):
        return value
    text = value.strip()
    try:
        if kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key_of(field_name)} ({kind})") from None
    return text


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key = key.strip()
        field_of(key)
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_config(path) -> TrainConfig:
    cfg = TrainConfig().with_overrides(parse_config_text(Path(path).read_text()))
    cfg.validate()
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_flat().items())
