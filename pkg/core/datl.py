"""Class-conditional feature alignment across domains.

Distances are squared Euclidean. For a target sample with feature f and class
c, a reference batch gives the class ratio

    r = sum_{same class} exp(-d) / sum_{other classes} exp(-d)

The alignment loss mixes a cross-domain ratio (source batch as reference) and
a within-target ratio (other labeled target samples as reference), weighted
by beta. beta itself can be estimated from how well a linear discriminator
tells the two domains apart.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Union

import numpy as np
import torch
from sklearn.linear_model import SGDClassifier
from sklearn.model_selection import StratifiedKFold, cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from core.cube import DOMAIN_TAGS, SOURCE, TARGET, UNLABELED
from core.errors import ArgumentError, DegenerateSupportError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]

FIXED = "fixed"
PAD = "pad"
BETA_MODES = (FIXED, PAD)


@dataclass
class FeatureBatch:
    """Per-domain features (N x d) with labels (0 = unlabeled)."""

    domain_tag: str
    features: ArrayLike
    labels: ArrayLike

    def __post_init__(self):
        if self.domain_tag not in DOMAIN_TAGS:
            raise ArgumentError(f"Unknown domain tag '{self.domain_tag}'")
        if not isinstance(self.features, torch.Tensor):
            self.features = torch.as_tensor(np.asarray(self.features, dtype=np.float64))
        labels = self.labels.detach().cpu().numpy() if isinstance(self.labels, torch.Tensor) else self.labels
        self.labels = torch.as_tensor(np.asarray(labels, dtype=np.int64).reshape(-1))
        if self.features.ndim != 2:
            raise ShapeError(f"features must be N x d, got shape {tuple(self.features.shape)}")
        if self.labels.shape != (self.features.shape[0],):
            raise ShapeError(f"{self.labels.shape[0]} labels for {self.features.shape[0]} samples")
        if not bool(torch.isfinite(self.features).all()):
            raise ArgumentError("features contain NaN or Inf")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def labeled(self) -> "FeatureBatch":
        keep = self.labels != UNLABELED
        return FeatureBatch(self.domain_tag, self.features[keep], self.labels[keep])

    def numpy(self) -> np.ndarray:
        return self.features.detach().cpu().numpy().astype(np.float64)


@dataclass
class AdaptationConfig:
    """How beta is chosen for the alignment loss."""

    beta_mode: str = PAD
    beta: float = 0.5
    beta_clamp: tuple[float, float] = (0.0, 1.0)
    stability_shift: bool = True
    pad_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        self.beta_clamp = tuple(self.beta_clamp)

    def validate(self) -> None:
        if self.beta_mode not in BETA_MODES:
            raise ArgumentError(f"beta_mode must be one of {', '.join(BETA_MODES)}, got '{self.beta_mode}'")
        if not 0.0 <= self.beta <= 1.0:
            raise ArgumentError(f"beta must lie in [0, 1], got {self.beta}")
        lo, hi = self.beta_clamp
        if not 0.0 <= lo <= hi <= 1.0:
            raise ArgumentError(f"beta_clamp must satisfy 0 <= lo <= hi <= 1, got {self.beta_clamp}")
        if self.pad_folds < 2:
            raise ArgumentError(f"pad_folds must be >= 2, got {self.pad_folds}")

    def to_dict(self) -> dict:
        return asdict(self)


# === Distances and ratios ===

def _as_tensor(x: ArrayLike) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def pair_distance(fs: ArrayLike, ft: ArrayLike) -> torch.Tensor:
    """Squared Euclidean distance between two feature vectors."""
    fs, ft = _as_tensor(fs), _as_tensor(ft)
    if fs.shape != ft.shape:
        raise ShapeError(f"feature dimensions differ: {tuple(fs.shape)} vs {tuple(ft.shape)}")
    return ((fs - ft) ** 2).sum()


def pairwise_sq_dists(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """M x N squared distances, computed from explicit differences."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"feature dimensions differ: {a.shape[-1]} vs {b.shape[-1]}")
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(dim=-1)


def _log_mass(neg_dists: torch.Tensor, mask: torch.Tensor, stability_shift: bool) -> torch.Tensor:
    """Row-wise log of sum(exp(-d)) over masked entries."""
    if stability_shift:
        masked = torch.where(mask, neg_dists, torch.full_like(neg_dists, -torch.inf))
        return torch.logsumexp(masked, dim=-1)
    return torch.log((torch.exp(neg_dists) * mask).sum(dim=-1))


def neighbor_probs(source: FeatureBatch, ft: ArrayLike, stability_shift: bool = True) -> torch.Tensor:
    """Probability that ft picks each source sample as its neighbor."""
    if len(source) == 0:
        raise ArgumentError("source batch is empty")
    ft = _as_tensor(ft).to(source.features.dtype)
    if ft.shape != (source.dim,):
        raise ShapeError(f"feature dimensions differ: {tuple(ft.shape)} vs ({source.dim},)")
    neg = -((source.features - ft) ** 2).sum(dim=1)
    if stability_shift:
        return torch.softmax(neg, dim=0)
    weights = torch.exp(neg)
    return weights / weights.sum()


def log_class_prob(source: FeatureBatch, ft: ArrayLike, c: int, stability_shift: bool = True) -> torch.Tensor:
    ft = _as_tensor(ft).to(source.features.dtype)
    if ft.shape != (source.dim,):
        raise ShapeError(f"feature dimensions differ: {tuple(ft.shape)} vs ({source.dim},)")
    same = source.labels == c
    other = (source.labels != c) & (source.labels != UNLABELED)
    if not bool(same.any()) or not bool(other.any()):
        raise DegenerateSupportError(f"class {c} lacks same-class or different-class support")
    neg = -((source.features - ft) ** 2).sum(dim=1)
    return _log_mass(neg, same, stability_shift) - _log_mass(neg, other, stability_shift)


def class_prob(source: FeatureBatch, ft: ArrayLike, c: int, stability_shift: bool = True) -> torch.Tensor:
    """Same-class over different-class neighbor mass for ft."""
    return torch.exp(log_class_prob(source, ft, c, stability_shift))


# === Loss ===

def datl_loss(
    source: FeatureBatch,
    target_labeled: FeatureBatch,
    beta: float,
    stability_shift: bool = True,
) -> tuple[torch.Tensor, int]:
    """Alignment loss averaged over labeled target samples.

    Returns (loss, skipped). A target sample is skipped when a term with
    nonzero weight has no same-class or no different-class reference.
    """
    if not 0.0 <= beta <= 1.0:
        raise ArgumentError(f"beta must lie in [0, 1], got {beta}")
    if source.dim != target_labeled.dim:
        raise ShapeError(f"feature dimensions differ: {source.dim} vs {target_labeled.dim}")

    source = source.labeled()
    target = target_labeled.labeled()
    if len(target) == 0:
        raise DegenerateSupportError("no labeled target samples")

    dtype = torch.promote_types(source.features.dtype, target.features.dtype)
    fs = source.features.to(dtype)
    ft = target.features.to(dtype)
    ys, yt = source.labels, target.labels
    m = len(target)

    cross_same = yt[:, None] == ys[None, :]
    cross_other = ~cross_same
    eye = torch.eye(m, dtype=torch.bool)
    within_same = (yt[:, None] == yt[None, :]) & ~eye
    within_other = yt[:, None] != yt[None, :]

    usable = torch.ones(m, dtype=torch.bool)
    if beta > 0:
        usable &= cross_same.any(dim=1) & cross_other.any(dim=1)
    if beta < 1:
        usable &= within_same.any(dim=1) & within_other.any(dim=1)
    skipped = int((~usable).sum())
    if skipped == m:
        raise DegenerateSupportError(f"all {m} target samples lack class support")
    if skipped:
        logger.debug("datl_loss skipped %d of %d target samples", skipped, m)

    rows = usable.nonzero(as_tuple=True)[0]
    total = torch.zeros((), dtype=dtype)
    if beta > 0:
        neg = -pairwise_sq_dists(ft[rows], fs)
        log_cross = (_log_mass(neg, cross_same[rows], stability_shift)
                     - _log_mass(neg, cross_other[rows], stability_shift))
        total = total + beta * log_cross.mean()
    if beta < 1:
        neg = -pairwise_sq_dists(ft[rows], ft)
        log_within = (_log_mass(neg, within_same[rows], stability_shift)
                      - _log_mass(neg, within_other[rows], stability_shift))
        total = total + (1.0 - beta) * log_within.mean()
    return -total, skipped


# === Trade-off estimation ===

def pad_from_error(eps: float) -> float:
    """Proxy A-distance for a discriminator error eps."""
    return 2.0 * (1.0 - 2.0 * eps)


def beta_from_error(eps: float, clamp: tuple[float, float] = (0.0, 1.0)) -> float:
    """beta = 1 - 2*eps with eps clipped to [0, 0.5], then clamped."""
    eps = min(max(float(eps), 0.0), 0.5)
    beta = 1.0 - 2.0 * eps
    lo, hi = clamp
    return min(max(beta, lo), hi)


def discriminator_error(source: ArrayLike, target: ArrayLike, folds: int = 5, seed: int = 0) -> float:
    """Mean k-fold validation error of a hinge-loss linear domain classifier.

    The larger domain is subsampled to the size of the smaller one.
    """
    xs = source.detach().cpu().numpy() if isinstance(source, torch.Tensor) else np.asarray(source)
    xt = target.detach().cpu().numpy() if isinstance(target, torch.Tensor) else np.asarray(target)
    n = min(len(xs), len(xt))
    if n < folds:
        raise ArgumentError(f"Need at least {folds} samples per domain for {folds}-fold validation, got {n}")

    rng = np.random.default_rng(seed)
    if len(xs) > n:
        xs = xs[np.sort(rng.choice(len(xs), n, replace=False))]
    if len(xt) > n:
        xt = xt[np.sort(rng.choice(len(xt), n, replace=False))]

    x = np.vstack([xs, xt]).astype(np.float64)
    y = np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])
    model = make_pipeline(
        StandardScaler(),
        SGDClassifier(loss="hinge", alpha=1e-4, max_iter=1000, tol=1e-3, random_state=seed),
    )
    cv = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    accuracy = cross_val_score(model, x, y, cv=cv, scoring="accuracy")
    return float(1.0 - accuracy.mean())


def estimate_beta(source_feats: FeatureBatch, target_feats: FeatureBatch, cfg: AdaptationConfig) -> float:
    """beta from the domain discriminator's cross-validated error."""
    if len(source_feats) == 0 or len(target_feats) == 0:
        raise ArgumentError("both feature batches must be nonempty")
    if source_feats.dim != target_feats.dim:
        raise ShapeError(f"feature dimensions differ: {source_feats.dim} vs {target_feats.dim}")
    eps = discriminator_error(source_feats.numpy(), target_feats.numpy(), cfg.pad_folds, cfg.seed)
    beta = beta_from_error(eps, cfg.beta_clamp)
    logger.debug("Discriminator error %.3f -> beta %.3f", eps, beta)
    return beta


def resolve_beta(source_feats: FeatureBatch, target_feats: FeatureBatch, cfg: AdaptationConfig) -> float:
    """Fixed beta or the estimated one, per ``cfg.beta_mode``."""
    if cfg.beta_mode == FIXED:
        return cfg.beta
    return estimate_beta(source_feats, target_feats, cfg)


def source_batch(features: ArrayLike, labels: ArrayLike) -> FeatureBatch:
    return FeatureBatch(SOURCE, features, labels)


def target_batch(features: ArrayLike, labels: ArrayLike) -> FeatureBatch:
    return FeatureBatch(TARGET, features, labels)
