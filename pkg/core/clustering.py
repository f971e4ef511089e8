"""Clustering abstraction for pseudo-labeling."""

import logging
from abc import ABC, abstractmethod
from typing import Callable, Optional, Union

import numpy as np
import torch

from core.cube import PatchSet
from core.datl import FeatureBatch
from core.errors import ArgumentError

logger = logging.getLogger(__name__)

CLUSTERERS = ["kmeans", "dpgmm", "callable"]


class BaseClusterer(ABC):
    """Groups feature rows into at most ``k`` pseudo-classes.

    Implementations may use any integer ids. cluster_pseudo renumbers them to
    1..k' (k' <= k) and rejects more groups than asked for.
    """

    @abstractmethod
    def fit_predict(self, features: np.ndarray, k: int, seed: int) -> np.ndarray:
        """One cluster id per row of the N x d ``features``, same ``seed`` same ids."""

    @abstractmethod
    def name(self) -> str:
        """Short label for logs and error messages."""


def create_clusterer(name: str = "kmeans", **options) -> BaseClusterer:
    """Create a clusterer by name."""
    if name == "kmeans":
        from providers.clustering.kmeans_provider import KMeansClusterer

        return KMeansClusterer(**options)
    elif name == "dpgmm":
        from providers.clustering.dpgmm_provider import DPGMMClusterer

        return DPGMMClusterer(**options)
    elif name == "callable":
        from providers.clustering.callable_provider import CallableClusterer

        return CallableClusterer(**options)
    else:
        raise ArgumentError(f"Unknown clusterer: '{name}'. Supported: {', '.join(CLUSTERERS)}")


def _feature_matrix(data: Union[FeatureBatch, PatchSet, np.ndarray, torch.Tensor]) -> np.ndarray:
    if isinstance(data, FeatureBatch):
        return data.numpy()
    if isinstance(data, PatchSet):
        return data.flat().astype(np.float64)
    if isinstance(data, torch.Tensor):
        return data.detach().cpu().numpy().reshape(len(data), -1).astype(np.float64)
    array = np.asarray(data, dtype=np.float64)
    return array.reshape(len(array), -1)


def compact_labels(ids: np.ndarray) -> np.ndarray:
    """Renumber cluster ids to 1..k' in order of first appearance."""
    ids = np.asarray(ids).reshape(-1)
    _, first = np.unique(ids, return_index=True)
    order = ids[np.sort(first)]
    mapping = {int(old): new for new, old in enumerate(order, start=1)}
    return np.array([mapping[int(i)] for i in ids], dtype=np.int64)


def cluster_pseudo(
    data: Union[FeatureBatch, PatchSet, np.ndarray, torch.Tensor],
    k: int,
    seed: int,
    clusterer: Optional[Union[str, BaseClusterer, Callable]] = None,
) -> np.ndarray:
    """Pseudo-labels in 1..k from the configured clusterer (default k-means).

    ``clusterer`` may be a name, a BaseClusterer or a plain labeling function
    ``f(features, k, seed) -> ids``.
    """
    features = _feature_matrix(data)
    n = len(features)
    if k < 2:
        raise ArgumentError(f"k must be >= 2, got {k}")
    if n < k:
        raise ArgumentError(f"Cannot form {k} clusters from {n} samples")

    if n == k:
        return np.arange(1, n + 1, dtype=np.int64)

    if clusterer is None:
        clusterer = create_clusterer("kmeans")
    elif isinstance(clusterer, str):
        clusterer = create_clusterer(clusterer)
    elif not isinstance(clusterer, BaseClusterer):
        clusterer = create_clusterer("callable", fn=clusterer)

    ids = np.asarray(clusterer.fit_predict(features, k, seed)).reshape(-1)
    if ids.shape != (n,):
        raise ArgumentError(f"{clusterer.name()} returned {ids.shape[0]} labels for {n} samples")
    labels = compact_labels(ids)
    if labels.max() > k:
        raise ArgumentError(f"{clusterer.name()} returned more than {k} clusters")
    logger.info("%s: %d samples -> %d clusters", clusterer.name(), n, int(labels.max()))
    return labels
