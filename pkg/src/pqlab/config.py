"""Experiment configuration: one nested JSON document per run.

Example::

    {
      "task": "mnist-desk",
      "dataset": {"source": "mnist", "train_size": 8000, "test_size": 2000, "seed": 0},
      "architecture": "mini-cnn",
      "clean_epochs": 8,
      "trigger": {"size": 6, "target_class": 0},
      "attack": {"epochs_stage1": 2, "epochs_stage2": 20},
      "quantization": {"profile": "tflite_127", "mode": "fiq"},
      "defenses": {"strip": true, "nc": true},
      "output": "runs/mnist"
    }

Unknown keys are rejected so a typo cannot silently fall back to a default.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attack import AttackConfig, TriggerSpec
from .nn import ARCHITECTURES
from .quant import PROFILES

SOURCES = ("mnist", "synth", "idx")
MODES = ("fiq", "drq")


class ConfigError(ValueError):
    """Configuration that cannot be run as written."""


@dataclass
class DatasetSpec:
    source: str = "mnist"
    path: str | None = None  # directory holding the four IDX files (mnist / idx sources)
    train_size: int | None = None
    test_size: int | None = None
    seed: int = 0
    classes: int = 4  # synth only
    dim: int = 16  # synth only


@dataclass
class QuantSpec:
    profile: str = "tflite_127"
    mode: str = "fiq"


@dataclass
class DefenseSpec:
    strip: bool = True
    nc: bool = True
    strip_n: int = 20
    strip_alpha: float = 0.5
    strip_probe: int = 200
    nc_budget: int = 500
    nc_clean: int = 500
    calibration_sweep: bool = True
    joint_baseline: bool = False


@dataclass
class ExperimentConfig:
    task: str = "run"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    architecture: str = "mini-cnn"
    clean_epochs: int = 8
    clean_lr: float = 5e-4
    seed: int = 0
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    attack: AttackConfig = field(default_factory=AttackConfig)
    quantization: QuantSpec = field(default_factory=QuantSpec)
    defenses: DefenseSpec = field(default_factory=DefenseSpec)
    output: str | None = None

    def validate(self) -> "ExperimentConfig":
        d = self.dataset
        if d.source not in SOURCES:
            raise ConfigError(f"dataset.source must be one of {SOURCES}, got {d.source!r}")
        if d.source in ("mnist", "idx"):
            if d.source == "idx" and not d.path:
                raise ConfigError("dataset.path is required for idx datasets")
            if d.path and not Path(d.path).is_dir():
                raise ConfigError(f"dataset directory {d.path} does not exist")
        elif d.classes < 2:
            raise ConfigError("synthetic datasets need at least two classes")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.quantization.profile not in PROFILES:
            raise ConfigError(f"unknown quantization profile {self.quantization.profile!r}")
        if self.quantization.mode not in MODES:
            raise ConfigError(f"quantization.mode must be one of {MODES}")
        if self.attack.profile != self.quantization.profile:
            raise ConfigError("attack.profile and quantization.profile disagree")
        if self.clean_epochs < 0 or self.attack.epochs_stage1 < 0 or self.attack.epochs_stage2 < 0:
            raise ConfigError("epoch counts must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps() + "\n")
        return path


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name for f in fields(cls)}
    extra = sorted(set(data) - known)
    if extra:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(extra)}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    inherit_profile = "profile" not in data.get("attack", {})
    nested = {"dataset": DatasetSpec, "trigger": TriggerSpec, "attack": AttackConfig,
              "quantization": QuantSpec, "defenses": DefenseSpec}
    try:
        for key, cls in nested.items():
            if key in data:
                data[key] = _build(cls, data[key], key)
        cfg = _build(ExperimentConfig, data, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if inherit_profile:
        # the attack optimises against the deployment profile unless told otherwise
        cfg.attack.profile = cfg.quantization.profile
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)
