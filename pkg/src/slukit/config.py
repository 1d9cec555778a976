"""Experiment configuration: a YAML file per experiment, validated against
the public-benchmark defaults (Adam lr 0.0005, dropout 0.5, L2 1e-4,
25 epochs) when fields are omitted."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .schedules import ScheduleConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    path: str
    format: str = "conll-tsv"
    name: str | None = None

    def __post_init__(self):
        if self.format not in ("conll-tsv", "json"):
            raise ConfigError(f"unknown dataset format {self.format!r}")


@dataclass
class LMSection:
    checkpoint: str | None = None
    unlabeled: list[str] = field(default_factory=list)
    heldout_fraction: float = 0.05
    layers: int = 1
    hidden_size: int = 100
    word_dim: int = 100
    char_dim: int = 100
    batch_size: int = 32
    epochs: int = 50
    learning_rate: float = 1e-3
    min_count: int = 1
    resume_from: str | None = None

    def __post_init__(self):
        if not 0 < self.heldout_fraction < 1:
            raise ConfigError("heldout_fraction must lie in (0, 1)")
        if self.layers not in (1, 2):
            raise ConfigError("lm.layers must be 1 (light) or 2 (contextual)")


@dataclass
class OptimizerSection:
    algorithm: str = "adam"
    learning_rate: float = 5e-4
    dropout: float = 0.5
    l2_lambda: float = 1e-4
    batch_size: int = 32

    def __post_init__(self):
        if self.algorithm.lower() != "adam":
            raise ConfigError(f"unsupported optimizer {self.algorithm!r}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class ScheduleSection:
    max_epochs: int = 25
    patience: int = 5
    guf: bool = False
    discr: bool = False
    tlr: bool = False
    unfreeze_epoch: int = 12
    phase2_lr: float | None = None
    discr_ratio: float = 2.5
    tlr_warm_fraction: float = 0.125
    tlr_floor_ratio: float = 10.0

    def build(self, base_lr: float) -> ScheduleConfig:
        return ScheduleConfig(
            base_lr=base_lr,
            max_epochs=self.max_epochs,
            patience=self.patience,
            use_guf=self.guf,
            use_discr=self.discr,
            use_tlr=self.tlr,
            unfreeze_epoch=self.unfreeze_epoch,
            phase2_lr=self.phase2_lr,
            discr_ratio=self.discr_ratio,
            tlr_warm_fraction=self.tlr_warm_fraction,
            tlr_floor_ratio=self.tlr_floor_ratio,
        )


@dataclass
class SweepSection:
    conditions: list[str] = field(default_factory=list)
    sizes: list = field(default_factory=lambda: [100, 200, 500, 1000, 2000, 5000, 10000])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig | None = None
    condition: str = "NoUT"
    source_dataset: DatasetConfig | None = None
    lm: LMSection = field(default_factory=LMSection)
    pretrained_vectors: str | None = None
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    seed: int = 0
    min_count: int = 1
    hidden_size: int = 100
    output_dir: str = "out"

    def schedule_config(self) -> ScheduleConfig:
        return self.schedule.build(self.optimizer.learning_rate)

    def effective_settings(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "dataset": DatasetConfig,
    "source_dataset": DatasetConfig,
    "lm": LMSection,
    "optimizer": OptimizerSection,
    "schedule": ScheduleSection,
    "sweep": SweepSection,
}


def _build_section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    valid = {f for f in cls.__dataclass_fields__}
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    valid = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - valid
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS and value is not None:
            kwargs[key] = _build_section(_SECTIONS[key], value, f"{path}:{key}")
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
