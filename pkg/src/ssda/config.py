"""Run configuration: dataclasses, INI-style config files, presets, hashing.

Config files are flat `key = value` sections (diffable experiment records):

    [data]
    task = classification
    ...
    [train]
    preset = rot+adv+bn
    seed = 0
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .data import ConfigurationError, SyntheticShiftSpec
from .losses import LossWeights


@dataclass
class OptimizerConfig:
    kind: str = "sgd-momentum"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class TrainConfig:
    task: str = "classification"
    pretext_mode: str = "none"  # {"none", "Rot", "MixRot", "SPRot"}
    adversarial: bool = False
    bn_calibration: bool = False
    train_domain: str = "source"  # "target" = TAR upper bound
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    disc_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(lr=0.001))
    batch_size_source: int = 16
    batch_size_target: int = 16
    max_iters: int = 600
    eval_every: int = 200
    seed: int = 0
    feature_tap: str = "middle"
    crop_size: int = 16
    expand_all_rotations: bool = True
    loss_normalization: str = "mean"
    adv_target_only: bool = False
    bn_passes: int = 5

    def validate(self) -> None:
        if self.task not in ("classification", "segmentation"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.pretext_mode not in ("none", "Rot", "MixRot", "SPRot"):
            raise ConfigurationError(
                f"unknown pretext_mode {self.pretext_mode!r}")
        if self.train_domain not in ("source", "target"):
            raise ConfigurationError(
                f"unknown train_domain {self.train_domain!r}")
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be >= 0")
        if self.optimizer.lr < 0 or self.disc_optimizer.lr < 0:
            raise ConfigurationError("learning rate must be >= 0")
        if self.feature_tap not in ("middle", "final"):
            raise ConfigurationError(f"unknown feature_tap "
                                     f"{self.feature_tap!r}")
        if self.loss_normalization not in ("mean", "sum"):
            raise ConfigurationError(
                f"unknown loss_normalization {self.loss_normalization!r}")
        self.weights.validate()

    @property
    def num_pretext_labels(self) -> int:
        return 16 if self.pretext_mode == "SPRot" else 4

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# Table-1 style presets: everything the method ablates, as named configs.
PRESETS = {
    "src": {"pretext_mode": "none", "adversarial": False,
            "bn_calibration": False, "train_domain": "source"},
    "tar": {"pretext_mode": "none", "adversarial": False,
            "bn_calibration": False, "train_domain": "target"},
    "rot": {"pretext_mode": "Rot", "adversarial": False,
            "bn_calibration": False},
    "mixrot": {"pretext_mode": "MixRot", "adversarial": False,
               "bn_calibration": False},
    "sprot": {"pretext_mode": "SPRot", "adversarial": False,
              "bn_calibration": False},
    "adv": {"pretext_mode": "none", "adversarial": True,
            "bn_calibration": False},
    "rot+adv": {"pretext_mode": "Rot", "adversarial": True,
                "bn_calibration": False},
    "rot+adv+bn": {"pretext_mode": "Rot", "adversarial": True,
                   "bn_calibration": True},
    "src+bn": {"pretext_mode": "none", "adversarial": False,
               "bn_calibration": True, "train_domain": "source"},
}


def apply_preset(cfg: TrainConfig, preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
    for key, value in PRESETS[preset].items():
        setattr(cfg, key, value)
    return cfg


_BOOL = {"true": True, "false": False, "1": True, "0": False,
         "yes": True, "no": False}


def _coerce(current, raw: str, key: str):
    if isinstance(current, bool):
        if raw.lower() not in _BOOL:
            raise ConfigurationError(f"invalid boolean for {key!r}: {raw!r}")
        return _BOOL[raw.lower()]
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _apply_section(obj, section, section_name: str) -> None:
    for key, raw in section.items():
        if not hasattr(obj, key):
            raise ConfigurationError(
                f"unknown config field [{section_name}] {key!r}")
        setattr(obj, key, _coerce(getattr(obj, key), raw, key))


def load_config(path: str):
    """Parse a run config file into (SyntheticShiftSpec, TrainConfig)."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigurationError(f"config not found: {path}")
    spec = SyntheticShiftSpec()
    cfg = TrainConfig()
    for name in parser.sections():
        if name == "data":
            _apply_section(spec, parser[name], name)
        elif name == "train":
            section = dict(parser[name])
            preset = section.pop("preset", None)
            if preset:
                apply_preset(cfg, preset)
            _apply_section(cfg, section, name)
        elif name == "weights":
            _apply_section(cfg.weights, parser[name], name)
        elif name == "optimizer":
            _apply_section(cfg.optimizer, parser[name], name)
        elif name == "disc_optimizer":
            _apply_section(cfg.disc_optimizer, parser[name], name)
        else:
            raise ConfigurationError(f"unknown config section {name!r}")
    cfg.task = spec.task
    spec.validate()
    cfg.validate()
    return spec, cfg
