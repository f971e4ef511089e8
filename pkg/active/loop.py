"""Pool-based active learning with a simulated oracle.

Each round retrains a classifier on the labeled indices, scores it on a fixed
test set, asks a query strategy for the next ``step`` pool samples and moves
them to the labeled side with their ground-truth labels.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from sklearn.neighbors import NearestNeighbors

from core.cube import PatchSet
from core.errors import ArgumentError, StateError, StructureError
from core.netgraph import DROPOUT, NetworkSpec, mc_forward
from trainers.base import TrainConfig, TrainedModel
from trainers.evaluation import evaluate, trunk_features
from trainers.supervised import train_supervised
from utils.progress import ProgressFn, notify

logger = logging.getLogger(__name__)

RANDOM = "random"
ENTROPY = "entropy"
BALD = "bald"
DENSITY_WEIGHTED = "density_weighted"
STRATEGIES = [RANDOM, ENTROPY, BALD, DENSITY_WEIGHTED]


@dataclass
class ALState:
    """Labeled and pool indices over one PatchSet, plus the query budget.

    Both index arrays hold positions in the full PatchSet, not in the pool.
    """

    labeled_idx: np.ndarray
    pool_idx: np.ndarray
    budget: int
    step: int
    queried: int = 0
    history: list[tuple[int, float]] = field(default_factory=list)

    def __post_init__(self):
        self.labeled_idx = np.asarray(self.labeled_idx, dtype=np.int64)
        self.pool_idx = np.asarray(self.pool_idx, dtype=np.int64)
        if np.intersect1d(self.labeled_idx, self.pool_idx).size:
            raise StateError("labeled and pool indices overlap")
        if self.budget < 0 or self.step < 1:
            raise ArgumentError(f"budget must be >= 0 and step >= 1, got {self.budget}, {self.step}")

    @property
    def size(self) -> int:
        return len(self.labeled_idx) + len(self.pool_idx)

    @property
    def remaining(self) -> int:
        return self.budget - self.queried


def initial_state(data: PatchSet, per_class: int, budget: int, step: int, seed: int = 0) -> ALState:
    """Start with ``per_class`` random samples of every class labeled."""
    rng = np.random.default_rng(seed)
    labeled = []
    for c in np.unique(data.labels):
        members = np.flatnonzero(data.labels == c)
        if len(members) < per_class:
            raise ArgumentError(f"class {int(c)} has {len(members)} samples, {per_class} requested")
        labeled.extend(rng.choice(members, size=per_class, replace=False))
    labeled = np.sort(np.asarray(labeled, dtype=np.int64))
    pool = np.setdiff1d(np.arange(len(data)), labeled)
    return ALState(labeled_idx=labeled, pool_idx=pool, budget=budget, step=step)


# === Query strategies ===

def _top(scores: np.ndarray, n: int) -> np.ndarray:
    # stable sort keeps the lowest index first among ties
    return np.argsort(-scores, kind="stable")[:n]


def _require_dropout(model: TrainedModel, strategy: str) -> None:
    if not model.spec.count(DROPOUT):
        raise StructureError(f"'{strategy}' querying needs a model with dropout layers")


def density(features: np.ndarray, k_neighbors: int = 10) -> np.ndarray:
    """Mean cosine similarity of each sample to its k nearest neighbors."""
    n = len(features)
    k = min(k_neighbors, n - 1)
    if k < 1:
        return np.ones(n)
    nn = NearestNeighbors(n_neighbors=k + 1, metric="cosine").fit(features)
    distances, _ = nn.kneighbors(features)
    return (1.0 - distances[:, 1:]).mean(axis=1)


def query(
    strategy: str,
    model: Optional[TrainedModel],
    pool: PatchSet,
    n: int,
    seed: int = 0,
    mc_passes: int = 16,
    k_neighbors: int = 10,
) -> np.ndarray:
    """Positions in ``pool`` of the n samples to label next."""
    if strategy not in STRATEGIES:
        raise ArgumentError(f"Unknown strategy '{strategy}'. Supported: {', '.join(STRATEGIES)}")
    if n < 0 or n > len(pool):
        raise ArgumentError(f"Cannot query {n} samples from a pool of {len(pool)}")
    if n == len(pool):
        return np.arange(n)

    if strategy == RANDOM:
        return np.random.default_rng(seed).choice(len(pool), size=n, replace=False)

    if model is None:
        raise ArgumentError(f"'{strategy}' querying needs a trained model")
    _require_dropout(model, strategy)
    mc = mc_forward(model.spec, model.params, pool.patches, mc_passes, seed)

    if strategy == ENTROPY:
        return _top(mc.entropy, n)
    if strategy == BALD:
        if not np.any(mc.mutual_information > 0):
            logger.info("All mutual information is 0, ranking by entropy")
            return _top(mc.entropy, n)
        return _top(mc.mutual_information, n)
    return _top(mc.entropy * density(trunk_features(model, pool), k_neighbors), n)


def oracle_label(state: ALState, indices: Sequence[int], truth: np.ndarray) -> np.ndarray:
    """Reveal the true labels at ``indices`` and move them to the labeled set."""
    indices = np.asarray(indices, dtype=np.int64)
    if len(np.unique(indices)) != len(indices):
        raise StateError("duplicate indices in one oracle request")
    already = np.intersect1d(indices, state.labeled_idx)
    if already.size:
        raise StateError(f"indices already labeled: {already.tolist()}")
    missing = np.setdiff1d(indices, state.pool_idx)
    if missing.size:
        raise StateError(f"indices not in the pool: {missing.tolist()}")

    state.labeled_idx = np.concatenate([state.labeled_idx, indices])
    state.pool_idx = np.setdiff1d(state.pool_idx, indices)
    state.queried += len(indices)
    return np.asarray(truth)[indices]


# === Loop ===

@dataclass
class CurvePoint:
    round: int
    labels_used: int
    overall_accuracy: float
    per_class_accuracy: list[float]


@dataclass
class LearningCurve:
    strategy: str
    points: list[CurvePoint] = field(default_factory=list)

    @property
    def labels_used(self) -> list[int]:
        return [p.labels_used for p in self.points]

    @property
    def accuracies(self) -> list[float]:
        return [p.overall_accuracy for p in self.points]

    def write_csv(self, path: Union[str, Path]) -> Path:
        """round, labels_used, OA, then one column per class."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n_classes = max((len(p.per_class_accuracy) for p in self.points), default=0)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["round", "labels_used", "overall_accuracy"] + [f"class_{c}" for c in range(1, n_classes + 1)])
            for p in self.points:
                writer.writerow([p.round, p.labels_used, f"{p.overall_accuracy:.6f}"]
                                + [f"{a:.6f}" for a in p.per_class_accuracy])
        return path


def labels_to_reach(curve: LearningCurve, target_oa: float) -> Optional[int]:
    """Fewest labels at which the curve reaches ``target_oa``, or None."""
    for point in curve.points:
        if point.overall_accuracy >= target_oa:
            return point.labels_used
    return None


def _plateaued(accuracies: list[float], patience: int, tol: float) -> bool:
    if len(accuracies) <= patience:
        return False
    best_before = max(accuracies[:-patience])
    return max(accuracies[-patience:]) <= best_before + tol


def run_loop(
    initial: ALState,
    strategy: str,
    spec: NetworkSpec,
    data: PatchSet,
    train_cfg: TrainConfig,
    test: PatchSet,
    on_progress: Optional[ProgressFn] = None,
    plateau_patience: Optional[int] = None,
    plateau_tol: float = 0.0,
    k_neighbors: int = 10,
) -> LearningCurve:
    """Retrain, evaluate, query and label until the budget runs out.

    ``initial`` is copied; ``data`` carries the ground truth the oracle reveals.
    """
    if strategy not in STRATEGIES:
        raise ArgumentError(f"Unknown strategy '{strategy}'. Supported: {', '.join(STRATEGIES)}")
    if 0 < initial.budget < initial.step:
        raise ArgumentError(f"budget {initial.budget} is smaller than the step {initial.step}")
    if initial.size != len(data):
        raise ArgumentError(f"state covers {initial.size} samples but the data holds {len(data)}")
    if len(initial.labeled_idx) == 0:
        raise ArgumentError("initial labeled set is empty")
    missing = np.setdiff1d(np.unique(data.labels), data.labels[initial.labeled_idx])
    if missing.size:
        raise ArgumentError(f"initial labeled set lacks classes {missing.tolist()}")
    if strategy != RANDOM and not spec.count(DROPOUT):
        raise StructureError(f"'{strategy}' querying needs a spec with dropout layers")

    state = ALState(initial.labeled_idx.copy(), initial.pool_idx.copy(), initial.budget, initial.step)
    curve = LearningCurve(strategy=strategy)
    model: Optional[TrainedModel] = None
    total_rounds = initial.budget // initial.step + 1
    round_no = 0

    while True:
        round_no += 1
        warm = model.params if (train_cfg.warm_start and model is not None) else None
        model = train_supervised(spec, data.subset(state.labeled_idx), train_cfg, init=warm)
        result = evaluate(model, test)
        labels_used = len(state.labeled_idx)
        curve.points.append(CurvePoint(round_no, labels_used, result.overall_accuracy, result.per_class_accuracy))
        state.history.append((labels_used, result.overall_accuracy))
        logger.info("%s round %d: %d labels, OA %.4f", strategy, round_no, labels_used, result.overall_accuracy)
        notify(on_progress, f"active-{strategy}", round_no, total_rounds)

        n = min(state.step, state.remaining, len(state.pool_idx))
        if n == 0:
            break
        if plateau_patience and _plateaued(curve.accuracies, plateau_patience, plateau_tol):
            logger.info("Accuracy plateaued after %d rounds", round_no)
            break

        pool = data.subset(state.pool_idx)
        picked = query(strategy, model, pool, n, seed=train_cfg.seed + round_no,
                       mc_passes=train_cfg.mc_passes, k_neighbors=k_neighbors)
        oracle_label(state, state.pool_idx[picked], data.labels)
        if state.size != len(data):
            raise StateError("labeled/pool conservation violated")

    return curve
