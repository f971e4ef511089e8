"""Prediction and accuracy metrics."""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.metrics import confusion_matrix, silhouette_score

from core.cube import PatchSet
from core.errors import ArgumentError
from core.netgraph import forward, tap_features, trunk
from trainers.base import TrainedModel

logger = logging.getLogger(__name__)


@dataclass
class Evaluation:
    """Overall, per-class and average accuracy, kappa and the confusion matrix.

    Rows of ``confusion`` are true classes, columns predicted (both 1..C).
    """

    overall_accuracy: float
    per_class_accuracy: list[float]
    average_accuracy: float
    kappa: float
    confusion: np.ndarray
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "average_accuracy": self.average_accuracy,
            "kappa": self.kappa,
            "confusion": self.confusion.tolist(),
            "n_samples": self.n_samples,
        }


@dataclass
class Summary:
    mean: float
    std: Optional[float]
    values: list[float] = field(default_factory=list)

    @property
    def text(self) -> str:
        return format_oa(self.mean, self.std)


def format_oa(mean: float, std: Optional[float] = None) -> str:
    """Percent with one decimal: '95.8 ± 1.1', or '95.8' without a spread."""
    if std is None:
        return f"{100.0 * mean:.1f}"
    return f"{100.0 * mean:.1f} ± {100.0 * std:.1f}"


def predict(model: TrainedModel, patches: PatchSet) -> np.ndarray:
    """Class ids 1..C (deterministic forward)."""
    with torch.no_grad():
        result = forward(model.spec, model.params, patches.patches)
    return result.logits.argmax(dim=1).numpy() + 1


def evaluate_predictions(y_true: np.ndarray, y_pred: np.ndarray, n_classes: Optional[int] = None) -> Evaluation:
    y_true = np.asarray(y_true).reshape(-1)
    y_pred = np.asarray(y_pred).reshape(-1)
    if y_true.size == 0:
        raise ArgumentError("Cannot evaluate on an empty set")
    if y_true.shape != y_pred.shape:
        raise ArgumentError(f"{y_pred.size} predictions for {y_true.size} labels")

    n_classes = n_classes or int(max(y_true.max(), y_pred.max()))
    classes = np.arange(1, n_classes + 1)
    cm = confusion_matrix(y_true, y_pred, labels=classes)
    total = cm.sum()
    oa = float(np.trace(cm) / total)

    support = cm.sum(axis=1)
    per_class = [float(cm[i, i] / support[i]) if support[i] else float("nan") for i in range(n_classes)]
    present = [acc for acc, n in zip(per_class, support) if n]
    aa = float(np.mean(present))

    expected = float((cm.sum(axis=0) * support).sum()) / float(total) ** 2
    kappa = 1.0 if expected == 1.0 else (oa - expected) / (1.0 - expected)
    return Evaluation(oa, per_class, aa, float(kappa), cm, int(total))


def evaluate(model: TrainedModel, test: PatchSet) -> Evaluation:
    if len(test) == 0:
        raise ArgumentError("Test set is empty")
    if not test.is_labeled:
        raise ArgumentError("Test set must be labeled")
    return evaluate_predictions(test.labels, predict(model, test), model.spec.n_classes)


def summarize(oas: Sequence[float]) -> Summary:
    """Mean and sample std over seeds; std only for two or more runs."""
    values = [float(v) for v in oas]
    if not values:
        raise ArgumentError("No accuracies to summarize")
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return Summary(mean=mean, std=std, values=values)


def trunk_features(model: TrainedModel, patches: PatchSet) -> np.ndarray:
    """Deepest trunk activation, flattened."""
    body = trunk(model.spec)
    with torch.no_grad():
        result = forward(body, model.params, patches.patches)
    return tap_features(result, body.layer_ids[-1]).numpy()


def silhouette_gain(model: TrainedModel, patches: PatchSet) -> tuple[float, float]:
    """(silhouette of raw spectra, silhouette of trunk features) w.r.t. true classes."""
    if not patches.is_labeled or len(np.unique(patches.labels)) < 2:
        raise ArgumentError("silhouette needs at least two labeled classes")
    raw = silhouette_score(patches.flat(), patches.labels)
    learned = silhouette_score(trunk_features(model, patches), patches.labels)
    logger.debug("silhouette raw %.3f -> trunk %.3f", raw, learned)
    return float(raw), float(learned)
