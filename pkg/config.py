"""Experiment configuration for hsiAdapt.

One JSON document describes a run: where the data comes from, how it is
split, augmentation, the network config strings, the trainer and the report
block. Unknown keys and invalid values raise ConfigError naming the dotted
field, e.g. ``trainer.mode``.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Optional, Union

from core.augment import AugmentPlan
from core.datl import AdaptationConfig
from core.descriptors import get_descriptor
from core.errors import ConfigError, HsiError
from core.netgraph import parse_config, parse_fann_config
from core.synth import BandGrid, SynthConfig
from trainers.base import TrainConfig

SUPERVISED = "supervised"
SEMISUP_RECON = "semisup_recon"
PLSSDL = "plssdl"
FANN = "fann"
ACTIVE = "active"
MODES = [SUPERVISED, SEMISUP_RECON, PLSSDL, FANN, ACTIVE]

DEFAULT_SHIFT = "default"
IDENTITY = "identity"

SYNTHETIC = "synthetic"
FILES = "files"
DATASET_KINDS = [SYNTHETIC, FILES]

STRATEGIES = ["random", "entropy", "bald", "density_weighted"]

ENV_OUT_DIR = "HSIADAPT_OUT_DIR"
ENV_SEED = "HSIADAPT_SEED"


@dataclass
class DatasetConfig:
    """Synthetic generator settings or paths to ingested cubes."""

    kind: str = SYNTHETIC  # synthetic, files
    shift: str = DEFAULT_SHIFT  # default, identity (synthetic only)
    synth: SynthConfig = field(default_factory=SynthConfig)
    source_header: Optional[str] = None
    source_labels: Optional[str] = None
    target_header: Optional[str] = None
    target_labels: Optional[str] = None
    source_descriptor: Optional[str] = None
    target_descriptor: Optional[str] = None
    domain: str = "target"  # domain used by single-domain modes

    def synth_config(self) -> SynthConfig:
        if self.shift == IDENTITY:
            s = self.synth
            return SynthConfig.identity(
                n_classes=s.n_classes, height=s.height, width=s.width,
                source_grid=s.source_grid, source_kind=s.source_kind, target_kind=s.source_kind,
            )
        return self.synth


@dataclass
class SplitConfig:
    per_class: int = 5          # labeled training pixels per class (single-domain modes, FANN target)
    source_per_class: int = 50  # labeled source pixels per class (FANN)


@dataclass
class ModelConfig:
    """Network config strings in the layer grammar."""

    config: Optional[str] = None
    source_config: Optional[str] = None
    target_config: Optional[str] = None
    fann_config: Optional[str] = None  # row-per-alignment form; overrides source/target_config
    head_units: list[int] = field(default_factory=list)
    dropout: Optional[float] = None  # insert dropout after every conv unit
    window: int = 1
    auto_pool: bool = True


@dataclass
class TrainerConfig:
    mode: str = SUPERVISED
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class ActiveConfig:
    strategy: str = "entropy"
    initial_per_class: int = 2
    pool_per_class: int = 40
    budget: int = 60
    step: int = 10
    k_neighbors: int = 10
    plateau_patience: Optional[int] = None
    plateau_tol: float = 0.0


@dataclass
class ReportConfig:
    out_dir: str = "runs/default"
    seeds: list[int] = field(default_factory=lambda: [0])


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    augment: AugmentPlan = field(default_factory=AugmentPlan)
    model: ModelConfig = field(default_factory=ModelConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    active: ActiveConfig = field(default_factory=ActiveConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    @property
    def out_dir(self) -> Path:
        return Path(self.report.out_dir)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        validate_experiment(self)


# === Loading ===

def _check_keys(cls, data, prefix: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(prefix, f"expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
    return dict(data)


def _build(cls, data, prefix: str):
    data = _check_keys(cls, data, prefix)
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(prefix, str(e)) from e


def _synth_from_dict(data, prefix: str) -> SynthConfig:
    data = _check_keys(SynthConfig, data, prefix)
    for key in ("source_grid", "target_grid"):
        if key in data:
            data[key] = _build(BandGrid, data[key], f"{prefix}.{key}")
    return _build(SynthConfig, data, prefix)


def _train_from_dict(data, prefix: str) -> TrainConfig:
    data = _check_keys(TrainConfig, data, prefix)
    if "adaptation" in data:
        data["adaptation"] = _build(AdaptationConfig, data["adaptation"], f"{prefix}.adaptation")
    return _build(TrainConfig, data, prefix)


def experiment_from_dict(data: Mapping) -> ExperimentConfig:
    data = _check_keys(ExperimentConfig, data, "experiment")

    dataset = _check_keys(DatasetConfig, data.get("dataset", {}), "dataset")
    if "synth" in dataset:
        dataset["synth"] = _synth_from_dict(dataset["synth"], "dataset.synth")
    trainer = _check_keys(TrainerConfig, data.get("trainer", {}), "trainer")
    if "train" in trainer:
        trainer["train"] = _train_from_dict(trainer["train"], "trainer.train")

    cfg = ExperimentConfig(
        name=str(data.get("name", "experiment")),
        dataset=_build(DatasetConfig, dataset, "dataset"),
        split=_build(SplitConfig, data.get("split", {}), "split"),
        augment=_build(AugmentPlan, data.get("augment", {}), "augment"),
        model=_build(ModelConfig, data.get("model", {}), "model"),
        trainer=_build(TrainerConfig, trainer, "trainer"),
        active=_build(ActiveConfig, data.get("active", {}), "active"),
        report=_build(ReportConfig, data.get("report", {}), "report"),
    )
    return cfg


def apply_env(cfg: ExperimentConfig, environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """HSIADAPT_OUT_DIR replaces the output dir, HSIADAPT_SEED the seed list."""
    environ = os.environ if environ is None else environ
    if environ.get(ENV_OUT_DIR):
        cfg.report.out_dir = environ[ENV_OUT_DIR]
    if environ.get(ENV_SEED):
        try:
            cfg.report.seeds = [int(environ[ENV_SEED])]
        except ValueError:
            raise ConfigError(ENV_SEED, f"not an integer: '{environ[ENV_SEED]}'")
    return cfg


def load_experiment(path: Union[str, Path], environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Read, apply environment overrides and validate."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON: {e}") from e
    cfg = apply_env(experiment_from_dict(data), environ)
    validate_experiment(cfg)
    return cfg


# === Validation ===

def _delegate(prefix: str, check) -> None:
    try:
        check()
    except ConfigError:
        raise
    except HsiError as e:
        raise ConfigError(prefix, str(e)) from e


def validate_dataset(ds: DatasetConfig) -> None:
    if ds.kind not in DATASET_KINDS:
        raise ConfigError("dataset.kind", f"must be one of {', '.join(DATASET_KINDS)}, got '{ds.kind}'")
    if ds.shift not in (DEFAULT_SHIFT, IDENTITY):
        raise ConfigError("dataset.shift", f"must be 'default' or 'identity', got '{ds.shift}'")
    if ds.domain not in ("source", "target"):
        raise ConfigError("dataset.domain", f"must be 'source' or 'target', got '{ds.domain}'")
    if ds.kind == SYNTHETIC:
        _delegate("dataset.synth", ds.synth_config().validate)
        return
    for name in ("source_header", "source_labels", "target_header", "target_labels"):
        value = getattr(ds, name)
        if value is None:
            raise ConfigError(f"dataset.{name}", "required for file datasets")
        if not Path(value).is_file():
            raise ConfigError(f"dataset.{name}", f"file not found: {value}")
    for name in ("source_descriptor", "target_descriptor"):
        key = getattr(ds, name)
        if key is not None and get_descriptor(key) is None:
            raise ConfigError(f"dataset.{name}", f"unknown dataset '{key}'")


def _validate_model(cfg: ExperimentConfig) -> None:
    model = cfg.model
    if model.window < 1 or model.window % 2 == 0:
        raise ConfigError("model.window", f"must be an odd integer >= 1, got {model.window}")
    if model.dropout is not None and not 0.0 <= model.dropout < 1.0:
        raise ConfigError("model.dropout", f"must lie in [0, 1), got {model.dropout}")

    if cfg.trainer.mode == FANN:
        if model.fann_config:
            # band counts are only known after loading, any width checks the structure
            bands = cfg.dataset.synth.source_grid.bands
            _delegate("model.fann_config", lambda: parse_fann_config(
                model.fann_config, bands, bands, window=model.window, auto_pool=model.auto_pool
            ))
            return
        for name in ("source_config", "target_config"):
            value = getattr(model, name)
            if not value:
                raise ConfigError(f"model.{name}", "required for fann mode (or give model.fann_config)")
            _delegate(f"model.{name}", lambda v=value: parse_config(v, model.window, model.auto_pool))
        return

    if not model.config:
        raise ConfigError("model.config", f"required for {cfg.trainer.mode} mode")
    _delegate("model.config", lambda: parse_config(model.config, model.window, model.auto_pool))


def validate_experiment(cfg: ExperimentConfig) -> None:
    if cfg.trainer.mode not in MODES:
        raise ConfigError("trainer.mode", f"must be one of {', '.join(MODES)}, got '{cfg.trainer.mode}'")
    validate_dataset(cfg.dataset)

    if cfg.split.per_class < 1:
        raise ConfigError("split.per_class", f"must be >= 1, got {cfg.split.per_class}")
    if cfg.split.source_per_class < 1:
        raise ConfigError("split.source_per_class", f"must be >= 1, got {cfg.split.source_per_class}")

    _delegate("augment", cfg.augment.validate)
    _validate_model(cfg)
    _delegate("trainer.train", cfg.trainer.train.validate)

    active = cfg.active
    if active.strategy not in STRATEGIES:
        raise ConfigError("active.strategy", f"must be one of {', '.join(STRATEGIES)}, got '{active.strategy}'")
    if active.budget < 0:
        raise ConfigError("active.budget", f"must be >= 0, got {active.budget}")
    if active.step < 1:
        raise ConfigError("active.step", f"must be >= 1, got {active.step}")
    if 0 < active.budget < active.step:
        raise ConfigError("active.budget", f"{active.budget} is smaller than active.step {active.step}")
    if active.initial_per_class < 1 or active.pool_per_class <= active.initial_per_class:
        raise ConfigError("active.pool_per_class", "must exceed active.initial_per_class (>= 1)")

    if not cfg.report.seeds:
        raise ConfigError("report.seeds", "must be nonempty")
    if not all(isinstance(s, int) for s in cfg.report.seeds):
        raise ConfigError("report.seeds", "must be integers")
