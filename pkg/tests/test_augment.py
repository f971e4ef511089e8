"""Tests for augmentation ops and plan application."""

import sys
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.augment import (
    DIFFERENT,
    AugmentPlan,
    apply_dihedral,
    augment_patches,
    block_pairs,
    compose_dihedral,
    dihedral_variants,
    knn_pseudo_expand,
    random_occlusion,
    virtual_mix,
    virtual_scale,
)
from core.cube import PatchSet
from core.errors import ArgumentError, PairingError


def _patch_set(spectra, labels, coords, window=1):
    spectra = np.asarray(spectra, dtype=np.float32)
    patches = np.broadcast_to(spectra[:, None, None, :], (len(spectra), window, window, spectra.shape[1]))
    return PatchSet(window=window, patches=patches.copy(), labels=labels, origin_coords=coords)


class TestDihedral:
    """Rotations and flips."""

    def test_constant_patch_gives_identical_variants(self):
        variants = dihedral_variants(np.full((3, 3, 2), 0.4))
        assert variants.shape == (8, 3, 3, 2)
        assert np.all(variants == 0.4)

    def test_half_turn_is_involution(self):
        patch = np.random.default_rng(0).uniform(size=(5, 5, 3))
        assert np.array_equal(apply_dihedral(apply_dihedral(patch, 2), 2), patch)

    def test_window_one(self):
        patch = np.array([[[0.1, 0.2]]])
        assert np.array_equal(dihedral_variants(patch), np.repeat(patch[None], 8, axis=0))

    def test_variants_are_distinct_for_generic_patch(self):
        patch = np.arange(9, dtype=float).reshape(3, 3, 1)
        variants = dihedral_variants(patch)
        assert len({v.tobytes() for v in variants}) == 8

    def test_group_is_closed(self):
        patch = np.arange(9, dtype=float).reshape(3, 3, 1)
        for i in range(8):
            for j in range(8):
                composed = apply_dihedral(apply_dihedral(patch, j), i)
                assert np.array_equal(composed, apply_dihedral(patch, compose_dihedral(i, j)))

    def test_non_square(self):
        with pytest.raises(ArgumentError):
            dihedral_variants(np.zeros((3, 2, 1)))


class TestVirtualSamples:
    """Scaling and same-class mixing."""

    def test_scale_identity(self):
        s = np.array([0.1, 0.5, 0.9])
        assert np.array_equal(virtual_scale(s, 1.0), s)

    def test_scale_half(self):
        assert np.allclose(virtual_scale(np.full(4, 0.8), 0.5), 0.4)

    def test_scale_clips_reflectance(self):
        assert np.allclose(virtual_scale(np.full(3, 0.7), 2.0), 1.0)

    def test_scale_radiance_not_clipped(self):
        assert np.allclose(virtual_scale(np.full(3, 0.7), 2.0, kind="radiance"), 1.4)

    def test_scale_rejects_nonpositive(self):
        with pytest.raises(ArgumentError):
            virtual_scale(np.ones(3), 0.0)

    def test_mix_weight_one(self):
        s1, s2 = np.array([0.2, 0.4]), np.array([0.4, 0.6])
        assert np.array_equal(virtual_mix(s1, s2, 1.0), s1)

    def test_mix_half(self):
        assert np.allclose(virtual_mix(np.array([0.2, 0.4]), np.array([0.4, 0.6]), 0.5), [0.3, 0.5])

    def test_mix_across_classes(self):
        with pytest.raises(ArgumentError):
            virtual_mix(np.ones(2), np.ones(2), 0.5, label1=1, label2=2)

    def test_mix_stays_in_envelope(self):
        rng = np.random.default_rng(1)
        s1, s2 = rng.uniform(size=10), rng.uniform(size=10)
        for w in np.linspace(0.0, 1.0, 11):
            mixed = virtual_mix(s1, s2, w)
            assert np.all(mixed >= np.minimum(s1, s2) - 1e-12)
            assert np.all(mixed <= np.maximum(s1, s2) + 1e-12)


class TestOcclusion:
    """Rectangle fill with the per-band mean."""

    def test_zero_fraction_unchanged(self):
        patch = np.random.default_rng(0).uniform(size=(4, 4, 3))
        assert np.array_equal(random_occlusion(patch, 0.0, seed=1), patch)

    def test_quarter_of_four_by_four(self):
        patch = np.random.default_rng(0).uniform(size=(4, 4, 3))
        out = random_occlusion(patch, 0.25, seed=1)
        changed = np.any(out != patch, axis=2)
        assert changed.sum() == 4
        assert np.allclose(out[changed], patch.mean(axis=(0, 1)))

    def test_deterministic(self):
        patch = np.random.default_rng(0).uniform(size=(5, 5, 2))
        assert np.array_equal(random_occlusion(patch, 0.3, seed=9), random_occlusion(patch, 0.3, seed=9))

    def test_full_fraction_rejected(self):
        with pytest.raises(ArgumentError):
            random_occlusion(np.zeros((3, 3, 1)), 1.0, seed=0)


class TestBlockPairs:
    """Same/different pairs of labeled blocks."""

    def test_two_same_class(self):
        ps = _patch_set([[0.1], [0.2]], [1, 1], [[0, 0], [0, 1]], window=3)
        pairs = block_pairs(ps)
        assert len(pairs) == 1
        assert pairs.labels.tolist() == [1]

    def test_two_different_classes(self):
        ps = _patch_set([[0.1], [0.2]], [1, 2], [[0, 0], [0, 1]], window=3)
        pairs = block_pairs(ps)
        assert pairs.labels.tolist() == [DIFFERENT]

    def test_balanced_counts_match_enumeration(self):
        labels = [1] * 5 + [2] * 5
        ps = _patch_set(np.linspace(0.1, 0.9, 10)[:, None], labels, [[0, i] for i in range(10)], window=3)
        pairs = block_pairs(ps, seed=4)

        all_pairs = list(combinations(range(10), 2))
        n_same = sum(labels[a] == labels[b] for a, b in all_pairs)
        n_diff = len(all_pairs) - n_same
        assert (n_same, n_diff) == (20, 25)
        assert len(pairs) == 2 * min(n_same, n_diff)
        assert (pairs.labels == DIFFERENT).sum() == min(n_same, n_diff)
        for (a, b), y in zip(pairs.index_pairs, pairs.labels):
            assert a < b
            assert y == (labels[a] if labels[a] == labels[b] else DIFFERENT)

    def test_single_sample(self):
        ps = _patch_set([[0.1]], [1], [[0, 0]], window=3)
        with pytest.raises(PairingError):
            block_pairs(ps)

    def test_wrong_window(self):
        ps = _patch_set([[0.1], [0.2]], [1, 1], [[0, 0], [0, 1]], window=1)
        with pytest.raises(PairingError):
            block_pairs(ps, block_window=3)


def _brute_force_knn(labeled: PatchSet, pool: PatchSet, k: int, radius: float) -> dict[int, int]:
    promoted = {}
    for p in range(len(pool)):
        near = [i for i in range(len(labeled))
                if np.linalg.norm(labeled.origin_coords[i] - pool.origin_coords[p]) <= radius]
        if len(near) < k:
            continue
        dists = [float(np.sum((labeled.spectra()[i].astype(float) - pool.spectra()[p].astype(float)) ** 2))
                 for i in near]
        order = sorted(range(len(near)), key=lambda t: (dists[t], near[t]))[:k]
        votes = {int(labeled.labels[near[t]]) for t in order}
        if len(votes) == 1:
            promoted[p] = votes.pop()
    return promoted


class TestKnnPseudoExpand:
    """Spatially constrained spectral kNN promotion."""

    def test_identical_adjacent_neighbors_promote(self):
        labeled = _patch_set([[0.5, 0.5]] * 3, [2, 2, 2], [[0, 0], [0, 1], [1, 0]])
        pool = _patch_set([[0.5, 0.5]], [0], [[1, 1]])
        out = knn_pseudo_expand(labeled, pool, k=3, radius=1.5)
        assert out.labels.tolist() == [2]

    def test_split_vote_not_promoted(self):
        labeled = _patch_set([[0.5], [0.5]], [1, 2], [[0, 0], [0, 2]])
        pool = _patch_set([[0.5]], [0], [[0, 1]])
        assert len(knn_pseudo_expand(labeled, pool, k=2, radius=1.0)) == 0

    def test_nothing_in_radius(self):
        labeled = _patch_set([[0.5]], [1], [[0, 0]])
        pool = _patch_set([[0.5]], [0], [[9, 9]])
        assert len(knn_pseudo_expand(labeled, pool, k=1, radius=2.0)) == 0

    def test_matches_brute_force_on_blobs(self):
        rng = np.random.default_rng(3)
        coords = np.array([[r, c] for r in range(8) for c in range(8)])
        truth = np.where(coords[:, 1] < 4, 1, 2)
        spectra = np.where(truth[:, None] == 1, 0.3, 0.7) + 0.05 * rng.standard_normal((64, 3))
        spectra = np.clip(spectra, 0.0, 1.0)
        labeled_idx = rng.choice(64, 20, replace=False)
        pool_idx = np.setdiff1d(np.arange(64), labeled_idx)

        labeled = _patch_set(spectra[labeled_idx], truth[labeled_idx], coords[labeled_idx])
        pool = _patch_set(spectra[pool_idx], np.zeros(len(pool_idx), dtype=int), coords[pool_idx])
        out = knn_pseudo_expand(labeled, pool, k=2, radius=2.0)
        expected = _brute_force_knn(labeled, pool, k=2, radius=2.0)

        got = {tuple(xy): int(y) for xy, y in zip(out.origin_coords, out.labels)}
        want = {tuple(pool.origin_coords[p]): y for p, y in expected.items()}
        assert got == want
        assert set(out.labels.tolist()) <= {1, 2}


class TestAugmentPatches:
    """Plan application."""

    def _base(self):
        rng = np.random.default_rng(0)
        patches = rng.uniform(0.1, 0.9, size=(6, 3, 3, 4)).astype(np.float32)
        return PatchSet(window=3, patches=patches, labels=[1, 1, 1, 2, 2, 2],
                        origin_coords=[[0, i] for i in range(6)])

    def test_empty_plan_returns_originals(self):
        base = self._base()
        out = augment_patches(base, AugmentPlan())
        assert np.array_equal(out.patches, base.patches)

    def test_counts(self):
        base = self._base()
        plan = AugmentPlan(dihedral=True, n_scaled=2, n_mixed=3, n_occluded=1)
        out = augment_patches(base, plan)
        assert len(out) == 6 + 6 * 7 + 2 * (2 + 3 + 1)
        assert np.array_equal(out.patches[:6], base.patches)
        assert np.bincount(out.labels).tolist() == [0, len(out) // 2, len(out) // 2]

    def test_seeded(self):
        plan = AugmentPlan(n_scaled=2, n_mixed=2, seed=5)
        a = augment_patches(self._base(), plan)
        b = augment_patches(self._base(), plan)
        assert np.array_equal(a.patches, b.patches)

    def test_invalid_plan(self):
        with pytest.raises(ArgumentError):
            augment_patches(self._base(), AugmentPlan(scale_range=(1.2, 0.8)))
