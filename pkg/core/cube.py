"""Data model: cubes, label maps, patch sets, domain pairs and splits.

All containers are frozen after construction; arrays are made read-only so a
cube can be shared across workers without copying.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from core.errors import ArgumentError, CubeDataError, CubeFormatError

REFLECTANCE = "reflectance"
RADIANCE = "radiance"
CUBE_KINDS = (REFLECTANCE, RADIANCE)

SOURCE = "source"
TARGET = "target"
DOMAIN_TAGS = (SOURCE, TARGET)

UNLABELED = 0


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class HyperCube:
    """A height x width x bands raster with per-band wavelengths."""

    values: np.ndarray
    wavelengths_nm: np.ndarray
    kind: str = REFLECTANCE

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        wavelengths = np.asarray(self.wavelengths_nm, dtype=np.float64)

        if values.ndim != 3:
            raise CubeFormatError(f"Cube values must be 3-D (H, W, B), got shape {values.shape}")
        if self.kind not in CUBE_KINDS:
            raise CubeFormatError(f"Unknown cube kind '{self.kind}'. Supported: {', '.join(CUBE_KINDS)}")
        if wavelengths.shape != (values.shape[2],):
            raise CubeFormatError(
                f"{wavelengths.size} wavelengths given for {values.shape[2]} bands"
            )
        if wavelengths.size > 1 and not np.all(np.diff(wavelengths) > 0):
            raise CubeFormatError("Wavelengths must be strictly increasing")
        if not np.isfinite(values).all():
            raise CubeDataError("Cube contains NaN or Inf values")
        if self.kind == REFLECTANCE and (values.min(initial=0.0) < 0.0 or values.max(initial=0.0) > 1.0):
            raise CubeDataError("Reflectance values must lie in [0, 1]")
        if self.kind == RADIANCE and values.min(initial=0.0) < 0.0:
            raise CubeDataError("Radiance values must be >= 0")

        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "wavelengths_nm", _frozen(wavelengths))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    def spectrum(self, row: int, col: int) -> np.ndarray:
        return self.values[row, col]


@dataclass(frozen=True)
class LabelMap:
    """Pixel-level class ids (0 = unlabeled) with class names for 1..C."""

    classes: np.ndarray
    class_names: dict[int, str]

    def __post_init__(self):
        classes = np.ascontiguousarray(self.classes, dtype=np.int64)
        if classes.ndim != 2:
            raise CubeFormatError(f"Label map must be 2-D, got shape {classes.shape}")
        if classes.min(initial=0) < 0:
            raise CubeDataError("Class ids must be >= 0")

        names = {int(k): str(v) for k, v in self.class_names.items()}
        ids = sorted(names)
        if ids != list(range(1, len(ids) + 1)):
            raise CubeFormatError(f"Class ids must be contiguous 1..C, got {ids}")
        used = set(np.unique(classes).tolist()) - {UNLABELED}
        missing = sorted(used - set(ids))
        if missing:
            raise CubeFormatError(f"Class ids without a name: {missing}")

        object.__setattr__(self, "classes", _frozen(classes))
        object.__setattr__(self, "class_names", names)

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def labeled_indices(self) -> np.ndarray:
        """Row-major flat indices of all labeled pixels."""
        return np.flatnonzero(self.classes)

    def check_matches(self, cube: HyperCube) -> None:
        if (self.height, self.width) != (cube.height, cube.width):
            raise CubeFormatError(
                f"Label map {self.height}x{self.width} does not match cube {cube.height}x{cube.width}"
            )


@dataclass(frozen=True)
class PatchSet:
    """Windowed spectral-spatial samples: N x w x w x B patches with labels."""

    window: int
    patches: np.ndarray
    labels: np.ndarray
    origin_coords: np.ndarray
    domain_tag: str = SOURCE
    image_shape: Optional[tuple[int, int]] = None

    def __post_init__(self):
        patches = np.ascontiguousarray(self.patches, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        coords = np.ascontiguousarray(self.origin_coords, dtype=np.int64).reshape(-1, 2)

        if self.window < 1 or self.window % 2 == 0:
            raise ArgumentError(f"Window must be an odd integer >= 1, got {self.window}")
        if patches.ndim != 4 or patches.shape[1:3] != (self.window, self.window):
            raise ArgumentError(
                f"Patches must have shape (N, {self.window}, {self.window}, B), got {patches.shape}"
            )
        if not (len(patches) == len(labels) == len(coords)):
            raise ArgumentError("patches, labels and origin_coords must have equal length")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ArgumentError(f"Unknown domain tag '{self.domain_tag}'")
        if self.image_shape is not None and len(coords):
            h, w = self.image_shape
            if coords.min() < 0 or coords[:, 0].max() >= h or coords[:, 1].max() >= w:
                raise ArgumentError("origin_coords fall outside the image bounds")

        object.__setattr__(self, "patches", _frozen(patches))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "origin_coords", _frozen(coords))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def bands(self) -> int:
        return self.patches.shape[3]

    @property
    def n_classes(self) -> int:
        """Largest class id present (class ids are 1..C)."""
        return int(self.labels.max(initial=0))

    @property
    def is_labeled(self) -> bool:
        return len(self) > 0 and bool(np.all(self.labels > UNLABELED))

    def spectra(self) -> np.ndarray:
        """Center-pixel spectra, N x B."""
        c = self.window // 2
        return self.patches[:, c, c, :]

    def flat(self) -> np.ndarray:
        """Patches flattened to N x (w*w*B)."""
        return self.patches.reshape(len(self), -1)

    def subset(self, indices: Sequence[int]) -> "PatchSet":
        idx = np.asarray(indices, dtype=np.int64)
        return PatchSet(
            window=self.window,
            patches=self.patches[idx],
            labels=self.labels[idx],
            origin_coords=self.origin_coords[idx],
            domain_tag=self.domain_tag,
            image_shape=self.image_shape,
        )

    def labeled(self) -> "PatchSet":
        return self.subset(np.flatnonzero(self.labels > UNLABELED))

    def with_labels(self, labels: np.ndarray) -> "PatchSet":
        return PatchSet(
            window=self.window,
            patches=self.patches,
            labels=np.asarray(labels),
            origin_coords=self.origin_coords,
            domain_tag=self.domain_tag,
            image_shape=self.image_shape,
        )

    @staticmethod
    def concat(sets: Sequence["PatchSet"]) -> "PatchSet":
        if not sets:
            raise ArgumentError("Cannot concatenate an empty list of patch sets")
        first = sets[0]
        if any(s.window != first.window or s.bands != first.bands for s in sets):
            raise ArgumentError("Patch sets differ in window or band count")
        return PatchSet(
            window=first.window,
            patches=np.concatenate([s.patches for s in sets]),
            labels=np.concatenate([s.labels for s in sets]),
            origin_coords=np.concatenate([s.origin_coords for s in sets]),
            domain_tag=first.domain_tag,
            image_shape=first.image_shape,
        )


@dataclass(frozen=True)
class DomainPair:
    """Source and target scenes sharing one label space."""

    source: tuple[HyperCube, LabelMap]
    target: tuple[HyperCube, LabelMap]
    shift_metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for cube, labels in (self.source, self.target):
            labels.check_matches(cube)
        src_names = set(self.source[1].class_names.values())
        tgt_names = set(self.target[1].class_names.values())
        if src_names != tgt_names:
            raise ArgumentError(
                "Source and target label spaces differ: "
                f"{sorted(src_names ^ tgt_names)}"
            )


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/test pixel indices (row-major flat indices)."""

    per_class_train: int
    seed: int
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]

    def __post_init__(self):
        train = tuple(int(i) for i in self.train_indices)
        test = tuple(int(i) for i in self.test_indices)
        if set(train) & set(test):
            raise ArgumentError("Train and test indices overlap")
        object.__setattr__(self, "train_indices", train)
        object.__setattr__(self, "test_indices", test)


def class_means(cube: HyperCube, labels: LabelMap) -> dict[int, np.ndarray]:
    """Mean spectrum per labeled class (float64)."""
    labels.check_matches(cube)
    flat_values = cube.values.reshape(-1, cube.bands).astype(np.float64)
    flat_labels = labels.classes.reshape(-1)
    return {
        c: flat_values[flat_labels == c].mean(axis=0)
        for c in sorted(labels.class_names)
        if np.any(flat_labels == c)
    }


def spectral_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in radians between two spectra."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(np.arccos(np.clip(np.dot(a, b) / denom, -1.0, 1.0)))
