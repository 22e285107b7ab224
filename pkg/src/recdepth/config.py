"""Run configuration: one structured file (YAML) unifying model, training,
loss, sparsity, eval, and synthesis settings, with strict unknown-key
rejection, documented defaults, and a stable hash stored in checkpoints.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .evaluation import EvalConfig
from .losses import LossWeights
from .model import ModelConfig
from .sparsity import SparsePattern
from .training import TrainConfig


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic dataset synthesis: sequence counts per split and world shape.

    Scene resolution follows the model resolution so the whole pipeline stays
    consistent."""

    train_sequences: int = 3
    val_sequences: int = 1
    test_sequences: int = 1
    frames_per_sequence: int = 100
    base_distance: float = 6.0
    relief_amplitude: float = 1.8
    max_translation: float = 0.12
    max_rotation: float = 0.006

    def __post_init__(self):
        if min(self.train_sequences, self.val_sequences, self.test_sequences) < 0:
            raise ValueError("sequence counts must be nonnegative")
        if self.frames_per_sequence < 1:
            raise ValueError("frames_per_sequence must be positive")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset_root: str = "data/synth"
    output_dir: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    sparse: SparsePattern = field(default_factory=SparsePattern)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigurationError(f"unknown config key(s){where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
        if is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, f"{path}.{name}" if path else name)
        elif name == "resolution":
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid {path or 'config'}: {exc}") from exc


def config_from_dict(data: dict | None) -> RunConfig:
    return _build(RunConfig, data or {}, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return config_from_dict(data)


def save_config(cfg: RunConfig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(_listify(cfg.to_dict()), fh, sort_keys=False)


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, tuple):
        return [_listify(v) for v in obj]
    return obj


def smoke_profile(cfg: RunConfig) -> RunConfig:
    """Tiny everything (48x160, 64-channel bottleneck, one epoch per stage) so
    every mode runs end-to-end in minutes on a CPU."""
    return dataclasses.replace(
        cfg,
        model=dataclasses.replace(
            cfg.model, resolution=(48, 160), bottleneck_channels=64
        ),
        train=dataclasses.replace(
            cfg.train,
            batch_size=4,
            stage1_epochs=1,
            stage2_epochs=1,
            subseq_length=8,
            augment=False,
        ),
        synth=dataclasses.replace(
            cfg.synth,
            train_sequences=1,
            val_sequences=1,
            test_sequences=1,
            frames_per_sequence=24,
        ),
    )
