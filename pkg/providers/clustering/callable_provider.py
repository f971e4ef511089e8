"""Wraps any labeling function as a clusterer."""

from typing import Callable

import numpy as np

from core.clustering import BaseClusterer
from core.errors import ArgumentError


class CallableClusterer(BaseClusterer):
    """Delegates to ``fn(features, k, seed) -> ids``."""

    def __init__(self, fn: Callable[[np.ndarray, int, int], np.ndarray] = None, label: str = ""):
        if fn is None or not callable(fn):
            raise ArgumentError("callable clusterer needs a function")
        self._fn = fn
        self._label = label or getattr(fn, "__name__", "callable")

    def name(self) -> str:
        return self._label

    def fit_predict(self, features: np.ndarray, k: int, seed: int) -> np.ndarray:
        return np.asarray(self._fn(features, k, seed))
