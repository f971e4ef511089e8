"""Shared pytest setup: the slow marker and small fixtures."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from core.cube import HyperCube, LabelMap, PatchSet


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow reproduction tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running directional reproduction checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_cube():
    """6x5 cube, 4 bands, values in [0, 1]."""
    rng = np.random.default_rng(0)
    values = rng.uniform(0.0, 1.0, size=(6, 5, 4)).astype(np.float32)
    return HyperCube(values=values, wavelengths_nm=np.array([450.0, 550.0, 650.0, 750.0]))


@pytest.fixture
def small_labels():
    """Three classes in horizontal stripes with one unlabeled row."""
    classes = np.zeros((6, 5), dtype=np.int64)
    classes[0:2] = 1
    classes[2:4] = 2
    classes[4] = 3
    return LabelMap(classes=classes, class_names={1: "water", 2: "grass", 3: "soil"})


def toy_patches(n_per_class=8, n_classes=3, bands=6, window=1, seed=0, spread=0.05, domain_tag="source"):
    """Well-separated classes: each class is a flat spectrum at its own level."""
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(1, n_classes + 1), n_per_class)
    levels = np.linspace(0.1, 0.9, n_classes)[labels - 1]
    patches = levels[:, None, None, None] + rng.normal(scale=spread, size=(len(labels), window, window, bands))
    coords = np.stack([np.arange(len(labels)), np.zeros(len(labels), dtype=np.int64)], axis=1)
    return PatchSet(window=window, patches=patches, labels=labels, origin_coords=coords, domain_tag=domain_tag)


@pytest.fixture
def make_patches():
    return toy_patches
