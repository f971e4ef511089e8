"""Training configuration, trained-model container and the shared fit loop."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
import torch

from core.cube import PatchSet
from core.datl import AdaptationConfig
from core.errors import ArgumentError, StructureError, TrainingError
from core.netgraph import NetworkSpec, ParamStore, load_checkpoint
from utils.progress import ProgressFn, notify
from utils.provenance import deterministic_hash

logger = logging.getLogger(__name__)

OPTIMIZERS = ["sgd", "adam"]


@dataclass
class TrainConfig:
    """Hyperparameters shared by all trainers."""

    epochs: int = 60
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    optimizer: str = "sgd"  # sgd, adam
    momentum: float = 0.0

    # Loss weights
    lambda_recon: float = 0.0
    datl_weight: float = 1.0
    datl_weights: Optional[list[float]] = None  # per aligned pair; overrides datl_weight

    # Pseudo-label pretraining / fine-tuning
    freeze_depth: int = 0
    clusterer: str = "kmeans"  # kmeans, dpgmm
    n_clusters: int = 9
    n_init: int = 10
    head_units: list[int] = field(default_factory=list)

    # FANN
    beta_refresh: int = 5
    align_dim: int = 32
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)

    # Active learning
    mc_passes: int = 16
    warm_start: bool = False

    log_every: int = 10

    def validate(self) -> None:
        if self.epochs < 0:
            raise ArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ArgumentError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ArgumentError(f"Unknown optimizer '{self.optimizer}'. Supported: {', '.join(OPTIMIZERS)}")
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lambda_recon < 0:
            raise ArgumentError(f"lambda_recon must be >= 0, got {self.lambda_recon}")
        if self.datl_weight < 0 or any(w < 0 for w in self.datl_weights or []):
            raise ArgumentError("DATL weights must be >= 0")
        if self.freeze_depth < 0:
            raise ArgumentError(f"freeze_depth must be >= 0, got {self.freeze_depth}")
        if self.n_clusters < 2:
            raise ArgumentError(f"n_clusters must be >= 2, got {self.n_clusters}")
        if self.beta_refresh < 1 or self.align_dim < 1 or self.mc_passes < 1:
            raise ArgumentError("beta_refresh, align_dim and mc_passes must be >= 1")
        self.adaptation.validate()

    def pair_weights(self, n_pairs: int) -> list[float]:
        if self.datl_weights is None:
            return [self.datl_weight] * n_pairs
        if len(self.datl_weights) != n_pairs:
            raise ArgumentError(f"{len(self.datl_weights)} DATL weights given for {n_pairs} aligned pairs")
        return list(self.datl_weights)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if isinstance(data.get("adaptation"), dict):
            data["adaptation"] = AdaptationConfig(**data["adaptation"])
        return cls(**data)


@dataclass
class TrainedModel:
    """A network with its parameters, per-epoch history and provenance."""

    spec: NetworkSpec
    params: ParamStore
    history: list[dict] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)
    frozen_ids: tuple[str, ...] = ()
    extras: dict = field(default_factory=dict)

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    def final_loss(self) -> Optional[float]:
        return self.history[-1]["loss"] if self.history else None


def provenance(trainer: str, cfg: TrainConfig, **extra) -> dict:
    return {"trainer": trainer, "seed": cfg.seed, "config_hash": deterministic_hash(cfg), **extra}


def check_labels(spec: NetworkSpec, labels: np.ndarray) -> None:
    """Labels must be 1..C for a softmax head of width C."""
    if spec.n_classes is None:
        raise StructureError("Classifier spec must end in a softmax layer")
    if labels.size == 0:
        raise ArgumentError("Training set is empty")
    if labels.min() < 1:
        raise ArgumentError("Training labels must be >= 1 (0 is unlabeled)")
    if labels.max() > spec.n_classes:
        raise StructureError(
            f"Labels go up to class {int(labels.max())} but the softmax has {spec.n_classes} outputs"
        )


def patch_tensors(patches: PatchSet, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """Inputs N x w x w x B and zero-based class targets."""
    x = torch.tensor(patches.patches, dtype=dtype)
    y = torch.tensor(patches.labels - 1, dtype=torch.long)
    return x, y


def make_optimizer(tensors: Sequence[torch.Tensor], cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "adam":
        return torch.optim.Adam(tensors, lr=cfg.learning_rate)
    return torch.optim.SGD(tensors, lr=cfg.learning_rate, momentum=cfg.momentum)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


StepFn = Callable[[np.ndarray], dict[str, torch.Tensor]]


def run_epochs(
    cfg: TrainConfig,
    n_samples: int,
    trainable: Sequence[torch.Tensor],
    step: StepFn,
    step_name: str,
    on_progress: Optional[ProgressFn] = None,
    batches: Optional[Callable[[np.random.Generator], Iterator[np.ndarray]]] = None,
) -> list[dict]:
    """Mini-batch descent. ``step`` returns loss components with the total under "loss".

    Each history row holds the sample-weighted epoch mean of every component.
    """
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(trainable, cfg) if trainable else None
    history: list[dict] = []

    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = {}
        seen = 0
        batch_iter = batches(rng) if batches is not None else minibatches(n_samples, cfg.batch_size, rng)
        for idx in batch_iter:
            if optimizer is not None:
                optimizer.zero_grad()
            components = step(idx)
            loss = components["loss"]
            if not torch.isfinite(loss):
                raise TrainingError(f"{step_name}: non-finite loss at epoch {epoch}")
            if optimizer is not None and loss.requires_grad:
                loss.backward()
                optimizer.step()
            for name, value in components.items():
                sums[name] = sums.get(name, 0.0) + float(value) * len(idx)
            seen += len(idx)

        row = {"epoch": epoch, **{name: total / seen for name, total in sums.items()}}
        history.append(row)
        if epoch == 1 or epoch % cfg.log_every == 0 or epoch == cfg.epochs:
            logger.info("%s epoch %d/%d loss %.4f", step_name, epoch, cfg.epochs, row["loss"])
        notify(on_progress, step_name, epoch, cfg.epochs)

    return history


def freeze(params: ParamStore) -> ParamStore:
    """Detach all tensors after training."""
    return params.requires_grad_(False)


# === Checkpoints ===

def write_history_csv(history: Sequence[dict], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns: list[str] = []
    for row in history:
        columns.extend(k for k in row if k not in columns)
    if "epoch" in columns:
        columns.remove("epoch")
        columns.insert(0, "epoch")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns or ["epoch"])
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def save_model(model: TrainedModel, directory: Union[str, Path]) -> Path:
    """Checkpoint + manifest + history.csv under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model.params.save(
        directory / "model.pt",
        model.spec,
        extra={"provenance": model.provenance, "frozen_ids": list(model.frozen_ids), "history": model.history},
    )
    write_history_csv(model.history, directory / "history.csv")
    return directory


def load_model(directory: Union[str, Path]) -> TrainedModel:
    directory = Path(directory)
    path = directory / "model.pt"
    if not path.is_file():
        raise ArgumentError(f"No checkpoint in {directory}")
    spec, params = load_checkpoint(path)
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    return TrainedModel(
        spec=spec,
        params=params,
        history=manifest.get("history", []),
        provenance=manifest.get("provenance", {}),
        frozen_ids=tuple(manifest.get("frozen_ids", ())),
    )
