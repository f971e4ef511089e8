"""Label-preserving augmentation and pseudo-sample generation.

Single-sample ops take a w x w x B array; set-level ops take a PatchSet.
Every random op is driven by an explicit seed or numpy Generator.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from core.cube import REFLECTANCE, UNLABELED, PatchSet
from core.errors import ArgumentError, PairingError

logger = logging.getLogger(__name__)

DIFFERENT = 0  # pair label for blocks of different classes
N_DIHEDRAL = 8


@dataclass
class AugmentPlan:
    """Which augmentations to apply and with what parameters."""

    dihedral: bool = False
    scale_range: tuple[float, float] = (0.9, 1.1)
    mix_weight_range: tuple[float, float] = (0.3, 0.7)
    occlusion_fraction_range: tuple[float, float] = (0.1, 0.3)
    block_window: int = 3
    knn_k: int = 3
    knn_radius: float = 2.0
    n_scaled: int = 0      # per class
    n_mixed: int = 0       # per class
    n_occluded: int = 0    # per class
    knn_expand: bool = False
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.mix_weight_range = tuple(self.mix_weight_range)
        self.occlusion_fraction_range = tuple(self.occlusion_fraction_range)

    def validate(self) -> None:
        for name in ("scale_range", "mix_weight_range", "occlusion_fraction_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ArgumentError(f"{name}: lo must be <= hi, got [{lo}, {hi}]")
        if self.scale_range[0] <= 0:
            raise ArgumentError("scale_range must be positive")
        lo, hi = self.mix_weight_range
        if not (0 < lo and hi < 1):
            raise ArgumentError("mix_weight_range must lie in (0, 1)")
        lo, hi = self.occlusion_fraction_range
        if not (0 < lo and hi < 1):
            raise ArgumentError("occlusion_fraction_range must lie in (0, 1)")
        if self.block_window < 1 or self.block_window % 2 == 0:
            raise ArgumentError("block_window must be an odd integer >= 1")
        if self.knn_k < 1 or self.knn_radius < 0:
            raise ArgumentError("knn_k must be >= 1 and knn_radius >= 0")
        if min(self.n_scaled, self.n_mixed, self.n_occluded) < 0:
            raise ArgumentError("Per-class sample counts must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# === Dihedral group ===

def _check_square(patch: np.ndarray) -> None:
    if patch.ndim != 3 or patch.shape[0] != patch.shape[1]:
        raise ArgumentError(f"Expected a square w x w x B patch, got shape {patch.shape}")


def apply_dihedral(patch: np.ndarray, index: int) -> np.ndarray:
    """Variant ``index`` = 4*flip + rotation: flip columns, then rotate 90° ``rotation`` times."""
    _check_square(patch)
    flip, rotation = divmod(index % N_DIHEDRAL, 4)
    out = np.flip(patch, axis=1) if flip else patch
    return np.ascontiguousarray(np.rot90(out, rotation, axes=(0, 1)))


def dihedral_variants(patch: np.ndarray) -> np.ndarray:
    """All 8 rotations/flips of the spatial axes, shape 8 x w x w x B."""
    _check_square(patch)
    return np.stack([apply_dihedral(patch, k) for k in range(N_DIHEDRAL)])


def compose_dihedral(i: int, j: int) -> int:
    """Index k such that variant k equals variant i applied after variant j."""
    fi, ri = divmod(i % N_DIHEDRAL, 4)
    fj, rj = divmod(j % N_DIHEDRAL, 4)
    # a flip reverses the direction of a following rotation
    rotation = (ri + (-rj if fi else rj)) % 4
    return 4 * ((fi + fj) % 2) + rotation


# === Virtual samples ===

def virtual_scale(sample: np.ndarray, factor: float, kind: str = REFLECTANCE) -> np.ndarray:
    if factor <= 0:
        raise ArgumentError(f"Scale factor must be > 0, got {factor}")
    out = np.asarray(sample) * factor
    if kind == REFLECTANCE:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.asarray(sample).dtype, copy=False)


def virtual_mix(
    s1: np.ndarray,
    s2: np.ndarray,
    weight: float,
    label1: Optional[int] = None,
    label2: Optional[int] = None,
) -> np.ndarray:
    """weight*s1 + (1-weight)*s2 for two samples of the same class."""
    s1, s2 = np.asarray(s1), np.asarray(s2)
    if s1.shape != s2.shape:
        raise ArgumentError(f"Cannot mix samples of shapes {s1.shape} and {s2.shape}")
    if not 0.0 <= weight <= 1.0:
        raise ArgumentError(f"Mix weight must lie in [0, 1], got {weight}")
    if label1 is not None and label2 is not None and label1 != label2:
        raise ArgumentError(f"Cannot mix samples of different classes ({label1} and {label2})")
    if weight == 1.0:
        return s1.copy()
    if weight == 0.0:
        return s2.copy()
    return weight * s1 + (1.0 - weight) * s2


# === Occlusion ===

def _region_shape(n_pixels: int, w: int, rng: np.random.Generator) -> tuple[int, int]:
    exact = [(h, n_pixels // h) for h in range(1, w + 1) if n_pixels % h == 0 and n_pixels // h <= w]
    if exact:
        return exact[rng.integers(len(exact))]
    # no exact rectangle fits; take the closest square-ish one
    side = min(w, max(1, int(round(np.sqrt(n_pixels)))))
    return side, min(w, max(1, int(round(n_pixels / side))))


def random_occlusion(patch: np.ndarray, fraction: float, seed) -> np.ndarray:
    """Fill a random rectangle covering round(fraction * w*w) pixels with the per-band mean."""
    _check_square(patch)
    if fraction >= 1.0:
        raise ArgumentError(f"Occlusion fraction must be < 1, got {fraction}")
    if fraction < 0.0:
        raise ArgumentError(f"Occlusion fraction must be >= 0, got {fraction}")

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = patch.shape[0]
    out = np.array(patch, copy=True)
    n_pixels = int(round(fraction * w * w))
    if n_pixels == 0:
        return out

    h, wd = _region_shape(n_pixels, w, rng)
    top = rng.integers(0, w - h + 1)
    left = rng.integers(0, w - wd + 1)
    out[top:top + h, left:left + wd, :] = patch.mean(axis=(0, 1))
    return out


# === Block pairs ===

@dataclass(frozen=True)
class BlockPairs:
    """Paired blocks. ``labels`` holds the shared class id, or 0 for different classes."""

    first: np.ndarray
    second: np.ndarray
    labels: np.ndarray
    index_pairs: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def block_pairs(patches: PatchSet, block_window: int = 3, seed: int = 0) -> BlockPairs:
    """All unordered pairs of labeled blocks, same/different sets balanced by downsampling."""
    if patches.window != block_window:
        raise PairingError(f"Expected window {block_window}, got {patches.window}")
    if np.any(patches.labels == UNLABELED):
        raise PairingError("Block pairs need labeled samples only")
    n = len(patches)
    if n < 2:
        raise PairingError(f"Need at least 2 samples to form pairs, got {n}")

    i, j = np.triu_indices(n, k=1)
    same = patches.labels[i] == patches.labels[j]
    same_idx = np.flatnonzero(same)
    diff_idx = np.flatnonzero(~same)

    if len(same_idx) and len(diff_idx):
        rng = np.random.default_rng(seed)
        keep = min(len(same_idx), len(diff_idx))
        if len(same_idx) > keep:
            same_idx = np.sort(rng.choice(same_idx, keep, replace=False))
        else:
            diff_idx = np.sort(rng.choice(diff_idx, keep, replace=False))

    chosen = np.sort(np.concatenate([same_idx, diff_idx]))
    a, b = i[chosen], j[chosen]
    labels = np.where(same[chosen], patches.labels[a], DIFFERENT)
    logger.debug("Formed %d block pairs (%d same, %d different)", len(chosen), len(same_idx), len(diff_idx))
    return BlockPairs(
        first=patches.patches[a],
        second=patches.patches[b],
        labels=labels,
        index_pairs=np.stack([a, b], axis=1),
    )


# === kNN pseudo-labeling ===

def knn_pseudo_expand(labeled: PatchSet, pool: PatchSet, k: int, radius: float) -> PatchSet:
    """Promote pool samples whose k spectrally nearest labeled neighbors agree.

    Neighbors are restricted to labeled samples within ``radius`` pixels of the
    pool sample; samples with fewer than k such neighbors are not promoted.
    """
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    if len(labeled) == 0:
        raise ArgumentError("Labeled set is empty")

    spectra = labeled.spectra().astype(np.float64)
    tree = cKDTree(labeled.origin_coords)
    pool_spectra = pool.spectra().astype(np.float64)
    neighborhoods = tree.query_ball_point(pool.origin_coords, r=radius)

    promoted: list[int] = []
    new_labels: list[int] = []
    for p, candidates in enumerate(neighborhoods):
        if len(candidates) < k:
            continue
        candidates = np.sort(np.asarray(candidates, dtype=np.int64))
        dists = np.sum((spectra[candidates] - pool_spectra[p]) ** 2, axis=1)
        nearest = candidates[np.argsort(dists, kind="stable")[:k]]
        votes = labeled.labels[nearest]
        if np.all(votes == votes[0]):
            promoted.append(p)
            new_labels.append(int(votes[0]))

    expanded = pool.subset(promoted).with_labels(np.asarray(new_labels, dtype=np.int64))
    logger.debug("kNN expansion promoted %d of %d pool samples", len(promoted), len(pool))
    return expanded


# === Plan application ===

def augment_patches(
    patches: PatchSet,
    plan: AugmentPlan,
    pool: Optional[PatchSet] = None,
    kind: str = REFLECTANCE,
) -> PatchSet:
    """Grow a labeled training set according to ``plan``. Originals come first."""
    plan.validate()
    rng = np.random.default_rng(plan.seed)
    base = patches.labeled()
    if len(base) == 0:
        return base

    if plan.knn_expand and pool is not None and len(pool):
        expanded = knn_pseudo_expand(base, pool, plan.knn_k, plan.knn_radius)
        if len(expanded):
            base = PatchSet.concat([base, expanded])

    new_patches: list[np.ndarray] = []
    new_labels: list[int] = []
    new_coords: list[np.ndarray] = []

    def emit(sample: np.ndarray, label: int, coord: np.ndarray) -> None:
        new_patches.append(sample.astype(np.float32))
        new_labels.append(label)
        new_coords.append(coord)

    if plan.dihedral:
        for s, y, xy in zip(base.patches, base.labels, base.origin_coords):
            for variant in dihedral_variants(s)[1:]:
                emit(variant, int(y), xy)

    for c in np.unique(base.labels):
        members = np.flatnonzero(base.labels == c)
        for _ in range(plan.n_scaled):
            m = rng.choice(members)
            factor = rng.uniform(*plan.scale_range)
            emit(virtual_scale(base.patches[m], factor, kind), int(c), base.origin_coords[m])
        for _ in range(plan.n_mixed if len(members) > 1 else 0):
            a, b = rng.choice(members, 2, replace=False)
            weight = rng.uniform(*plan.mix_weight_range)
            emit(virtual_mix(base.patches[a], base.patches[b], weight, int(c), int(c)), int(c), base.origin_coords[a])
        for _ in range(plan.n_occluded):
            m = rng.choice(members)
            fraction = rng.uniform(*plan.occlusion_fraction_range)
            emit(random_occlusion(base.patches[m], fraction, rng), int(c), base.origin_coords[m])

    if not new_patches:
        return base
    extra = PatchSet(
        window=base.window,
        patches=np.stack(new_patches),
        labels=np.asarray(new_labels),
        origin_coords=np.stack(new_coords),
        domain_tag=base.domain_tag,
        image_shape=base.image_shape,
    )
    logger.info("Augmented %d samples to %d", len(base), len(base) + len(extra))
    return PatchSet.concat([base, extra])
