"""Tests for pseudo-label clustering."""

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.clustering import BaseClusterer, cluster_pseudo, compact_labels, create_clusterer
from core.datl import source_batch
from core.errors import ArgumentError
from providers.clustering.kmeans_provider import MAX_RESTARTS, KMeansClusterer


def _same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return all(len(set(b[a == v])) == 1 for v in np.unique(a)) and len(np.unique(a)) == len(np.unique(b))


class TestCompactLabels:
    """Renumbering of cluster ids."""

    def test_first_appearance_order(self):
        assert compact_labels(np.array([5, 5, 2, 7, 2])).tolist() == [1, 1, 2, 3, 2]

    def test_already_compact(self):
        assert compact_labels(np.array([1, 2, 3])).tolist() == [1, 2, 3]


class TestClusterPseudo:
    """cluster_pseudo over the built-in and custom clusterers."""

    def test_recovers_separated_classes(self, make_patches):
        ps = make_patches(n_per_class=10, n_classes=3)
        ids = cluster_pseudo(ps, 3, seed=0)
        assert ids.min() == 1 and ids.max() == 3
        assert _same_partition(ids, ps.labels)

    def test_deterministic(self, make_patches):
        ps = make_patches(n_per_class=10, n_classes=3, spread=0.3)
        assert np.array_equal(cluster_pseudo(ps, 4, seed=7), cluster_pseudo(ps, 4, seed=7))

    def test_accepts_feature_batch_and_tensor(self, make_patches):
        ps = make_patches(n_per_class=6, n_classes=2)
        flat = ps.flat()
        from_batch = cluster_pseudo(source_batch(flat, ps.labels), 2, seed=0)
        from_tensor = cluster_pseudo(torch.tensor(ps.patches), 2, seed=0)
        assert np.array_equal(from_batch, from_tensor)

    def test_n_equals_k(self):
        ids = cluster_pseudo(np.zeros((4, 3)), 4, seed=0)
        assert ids.tolist() == [1, 2, 3, 4]

    def test_k_too_small(self):
        with pytest.raises(ArgumentError):
            cluster_pseudo(np.zeros((4, 3)), 1, seed=0)

    def test_fewer_samples_than_k(self):
        with pytest.raises(ArgumentError):
            cluster_pseudo(np.zeros((3, 3)), 4, seed=0)

    def test_plain_function(self):
        def by_sign(features, k, seed):
            return (features[:, 0] > 0).astype(int) * 10

        ids = cluster_pseudo(np.array([[-1.0], [2.0], [-3.0], [4.0]]), 2, seed=0, clusterer=by_sign)
        assert ids.tolist() == [1, 2, 1, 2]

    def test_wrong_label_count(self):
        with pytest.raises(ArgumentError):
            cluster_pseudo(np.zeros((5, 2)), 2, seed=0, clusterer=lambda f, k, s: np.zeros(3))

    def test_too_many_clusters(self):
        with pytest.raises(ArgumentError):
            cluster_pseudo(np.zeros((5, 2)), 2, seed=0, clusterer=lambda f, k, s: np.arange(5))

    def test_subclass_ids_renumbered(self):
        class Halves(BaseClusterer):
            def fit_predict(self, features, k, seed):
                return np.where(np.arange(len(features)) < 3, 40, -2)

            def name(self):
                return "halves"

        ids = cluster_pseudo(np.zeros((6, 2)), 4, seed=0, clusterer=Halves())
        assert ids.tolist() == [1, 1, 1, 2, 2, 2]

    def test_dpgmm_at_most_k(self, make_patches):
        ps = make_patches(n_per_class=12, n_classes=2)
        ids = cluster_pseudo(ps, 5, seed=0, clusterer="dpgmm")
        assert 1 <= ids.max() <= 5
        assert ids.shape == (24,)


class TestCreateClusterer:
    """Clusterer factory."""

    def test_known_names(self):
        assert isinstance(create_clusterer("kmeans"), BaseClusterer)
        assert create_clusterer("dpgmm").name() == "DP Gaussian mixture"
        assert create_clusterer("callable", fn=lambda f, k, s: f, label="mine").name() == "mine"

    def test_unknown_name(self):
        with pytest.raises(ArgumentError):
            create_clusterer("spectral")

    def test_callable_needs_function(self):
        with pytest.raises(ArgumentError):
            create_clusterer("callable")

    def test_restarts_capped(self):
        assert KMeansClusterer(n_init=500).n_init == MAX_RESTARTS
        assert KMeansClusterer(n_init=0).n_init == 1
