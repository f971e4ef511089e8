"""Patch extraction and train/test splits over labeled pixels."""

import logging
from typing import Union

import numpy as np

from core.cube import SOURCE, UNLABELED, HyperCube, LabelMap, PatchSet, SplitSpec
from core.errors import ArgumentError, SplitError

logger = logging.getLogger(__name__)

LABELED = "labeled"
ALL = "all"


def _selected_indices(labels: LabelMap, which: Union[str, np.ndarray]) -> np.ndarray:
    if isinstance(which, str):
        if which == LABELED:
            return labels.labeled_indices()
        if which == ALL:
            return np.arange(labels.height * labels.width)
        raise ArgumentError(f"which must be '{LABELED}', '{ALL}' or an index array, got '{which}'")

    indices = np.asarray(which, dtype=np.int64).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= labels.height * labels.width):
        raise ArgumentError("Pixel indices fall outside the image")
    return indices


def extract_patches(
    cube: HyperCube,
    labels: LabelMap,
    window: int,
    which: Union[str, np.ndarray] = LABELED,
    domain_tag: str = SOURCE,
) -> PatchSet:
    """Cut one window x window patch centered on every selected pixel.

    Borders are mirror padded (edge pixel not repeated). ``which`` is
    "labeled", "all" or an array of row-major flat pixel indices.
    """
    if window < 1 or window % 2 == 0:
        raise ArgumentError(f"Window must be an odd integer >= 1, got {window}")
    if window > min(cube.height, cube.width):
        raise ArgumentError(
            f"Window {window} exceeds the image size {cube.height}x{cube.width}"
        )
    labels.check_matches(cube)

    indices = _selected_indices(labels, which)
    rows, cols = np.divmod(indices, cube.width)

    half = window // 2
    padded = np.pad(cube.values, ((half, half), (half, half), (0, 0)), mode="reflect")

    # windows[r, c] is the patch centered on (r, c) in original coordinates
    windows = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(0, 1))
    patches = windows[rows, cols].transpose(0, 2, 3, 1)

    return PatchSet(
        window=window,
        patches=patches,
        labels=labels.classes[rows, cols],
        origin_coords=np.stack([rows, cols], axis=1),
        domain_tag=domain_tag,
        image_shape=(cube.height, cube.width),
    )


def split_labels(labels: LabelMap, per_class: int, seed: int) -> SplitSpec:
    """Sample ``per_class`` training pixels from every class; the rest is test."""
    if per_class < 1:
        raise ArgumentError(f"per_class must be >= 1, got {per_class}")

    rng = np.random.default_rng(seed)
    flat = labels.classes.reshape(-1)
    train: list[np.ndarray] = []
    test: list[np.ndarray] = []

    for class_id in sorted(labels.class_names):
        members = np.flatnonzero(flat == class_id)
        name = labels.class_names[class_id]
        if len(members) < per_class:
            raise SplitError(
                f"has {len(members)} labeled pixels, {per_class} requested",
                class_name=name,
            )
        chosen = rng.choice(members, size=per_class, replace=False)
        train.append(np.sort(chosen))
        test.append(np.setdiff1d(members, chosen))

    train_idx = np.concatenate(train)
    test_idx = np.concatenate(test)
    if test_idx.size == 0:
        raise SplitError("Split leaves an empty test set")

    logger.debug("Split %d train / %d test pixels (seed %d)", train_idx.size, test_idx.size, seed)
    return SplitSpec(
        per_class_train=per_class,
        seed=seed,
        train_indices=tuple(train_idx.tolist()),
        test_indices=tuple(np.sort(test_idx).tolist()),
    )


def split_patches(
    cube: HyperCube,
    labels: LabelMap,
    split: SplitSpec,
    window: int,
    domain_tag: str = SOURCE,
) -> tuple[PatchSet, PatchSet]:
    """Train and test patch sets for a split."""
    train = extract_patches(cube, labels, window, np.array(split.train_indices), domain_tag)
    test = extract_patches(cube, labels, window, np.array(split.test_indices), domain_tag)
    if np.any(train.labels == UNLABELED) or np.any(test.labels == UNLABELED):
        raise ArgumentError("Split refers to unlabeled pixels")
    return train, test
