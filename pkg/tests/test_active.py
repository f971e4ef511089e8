"""Tests for the active learning state, query strategies and loop."""

import csv
import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from active.loop import (
    BALD,
    DENSITY_WEIGHTED,
    ENTROPY,
    RANDOM,
    ALState,
    CurvePoint,
    LearningCurve,
    _plateaued,
    density,
    initial_state,
    labels_to_reach,
    oracle_label,
    query,
    run_loop,
)
from core.errors import ArgumentError, StateError, StructureError
from core.netgraph import parse_config
from trainers.base import TrainConfig
from trainers.pseudo import untrained

PLAIN_NET = "input-6 → fc-8 → softmax-3"
DROPOUT_NET = "input-6 → fc-8 → dropout-0.5 → softmax-3"


def _cfg(**overrides) -> TrainConfig:
    settings = dict(epochs=3, batch_size=8, learning_rate=0.01, optimizer="adam", mc_passes=4)
    settings.update(overrides)
    return TrainConfig(**settings)


class TestALState:
    """Index bookkeeping."""

    def test_overlap_rejected(self):
        with pytest.raises(StateError):
            ALState(labeled_idx=[0, 1], pool_idx=[1, 2], budget=2, step=1)

    def test_bad_budget_or_step(self):
        with pytest.raises(ArgumentError):
            ALState(labeled_idx=[0], pool_idx=[1], budget=-1, step=1)
        with pytest.raises(ArgumentError):
            ALState(labeled_idx=[0], pool_idx=[1], budget=1, step=0)

    def test_initial_state_per_class(self, make_patches):
        data = make_patches(n_per_class=5)
        state = initial_state(data, per_class=2, budget=6, step=2, seed=0)
        assert len(state.labeled_idx) == 6
        assert np.bincount(data.labels[state.labeled_idx]).tolist() == [0, 2, 2, 2]
        assert state.size == 15
        assert state.remaining == 6

    def test_initial_state_too_few(self, make_patches):
        with pytest.raises(ArgumentError):
            initial_state(make_patches(n_per_class=2), per_class=3, budget=0, step=1)


class TestOracle:
    """Revealing labels moves indices from pool to labeled."""

    @pytest.fixture
    def state(self):
        return ALState(labeled_idx=[0, 3], pool_idx=[1, 2, 4, 5], budget=4, step=2)

    def test_moves_indices(self, state):
        truth = np.array([1, 2, 3, 1, 2, 3])
        revealed = oracle_label(state, [4, 1], truth)
        assert revealed.tolist() == [2, 2]
        assert sorted(state.labeled_idx.tolist()) == [0, 1, 3, 4]
        assert state.pool_idx.tolist() == [2, 5]
        assert state.queried == 2
        assert state.size == 6

    def test_duplicates(self, state):
        with pytest.raises(StateError):
            oracle_label(state, [1, 1], np.zeros(6))

    def test_already_labeled(self, state):
        with pytest.raises(StateError):
            oracle_label(state, [0], np.zeros(6))

    def test_not_in_pool(self, state):
        with pytest.raises(StateError):
            oracle_label(state, [9], np.zeros(6))

    def test_pool_positions_map_to_full_indices(self, state, make_patches):
        data = make_patches(n_per_class=2)
        picked = query(RANDOM, None, data.subset(state.pool_idx), 2, seed=0)
        chosen = state.pool_idx[picked]
        revealed = oracle_label(state, chosen, data.labels)
        assert revealed.tolist() == data.labels[chosen].tolist()
        assert set(chosen.tolist()) <= set(state.labeled_idx.tolist())


class TestQuery:
    """Query strategies over a pool."""

    def test_random_is_seeded(self, make_patches):
        pool = make_patches()
        a = query(RANDOM, None, pool, 5, seed=3)
        assert np.array_equal(a, query(RANDOM, None, pool, 5, seed=3))
        assert len(set(a.tolist())) == 5

    def test_whole_pool(self, make_patches):
        assert query(ENTROPY, None, make_patches(n_per_class=2), 6).tolist() == list(range(6))

    def test_too_many(self, make_patches):
        with pytest.raises(ArgumentError):
            query(RANDOM, None, make_patches(n_per_class=1), 4)

    def test_unknown_strategy(self, make_patches):
        with pytest.raises(ArgumentError):
            query("margin", None, make_patches(), 1)

    def test_uncertainty_needs_model(self, make_patches):
        with pytest.raises(ArgumentError):
            query(ENTROPY, None, make_patches(), 2)

    def test_uncertainty_needs_dropout(self, make_patches):
        model = untrained(parse_config(PLAIN_NET), _cfg())
        with pytest.raises(StructureError):
            query(BALD, model, make_patches(), 2)

    @pytest.mark.parametrize("strategy", [ENTROPY, BALD, DENSITY_WEIGHTED])
    def test_returns_distinct_positions(self, make_patches, strategy):
        model = untrained(parse_config(DROPOUT_NET), _cfg())
        picked = query(strategy, model, make_patches(), 4, seed=1, mc_passes=6, k_neighbors=3)
        assert picked.shape == (4,)
        assert len(set(picked.tolist())) == 4
        assert picked.min() >= 0 and picked.max() < 24

    def test_density_of_identical_directions(self):
        features = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        np.testing.assert_allclose(density(features, k_neighbors=2), np.ones(3), atol=1e-9)

    def test_density_single_sample(self):
        assert density(np.ones((1, 3))).tolist() == [1.0]


class TestRunLoop:
    """The retrain-evaluate-query cycle."""

    @pytest.fixture
    def data(self, make_patches):
        return make_patches(n_per_class=6), make_patches(n_per_class=4, seed=1)

    def test_random_curve(self, data):
        pool, test = data
        state = initial_state(pool, per_class=1, budget=6, step=3)
        curve = run_loop(state, RANDOM, parse_config(PLAIN_NET), pool, _cfg(), test)
        assert curve.labels_used == [3, 6, 9]
        assert all(0.0 <= oa <= 1.0 for oa in curve.accuracies)

    def test_initial_state_not_mutated(self, data):
        pool, test = data
        state = initial_state(pool, per_class=1, budget=3, step=3)
        before = state.labeled_idx.copy()
        run_loop(state, RANDOM, parse_config(PLAIN_NET), pool, _cfg(), test)
        assert np.array_equal(state.labeled_idx, before)
        assert state.queried == 0

    def test_zero_budget_single_round(self, data):
        pool, test = data
        state = initial_state(pool, per_class=2, budget=0, step=3)
        curve = run_loop(state, RANDOM, parse_config(PLAIN_NET), pool, _cfg(), test)
        assert curve.labels_used == [6]

    def test_bald_with_dropout(self, data):
        pool, test = data
        state = initial_state(pool, per_class=1, budget=4, step=2)
        curve = run_loop(state, BALD, parse_config(DROPOUT_NET), pool, _cfg(), test)
        assert curve.labels_used == [3, 5, 7]

    def test_warm_start(self, data):
        pool, test = data
        state = initial_state(pool, per_class=1, budget=2, step=2)
        curve = run_loop(state, RANDOM, parse_config(PLAIN_NET), pool, _cfg(warm_start=True), test)
        assert curve.labels_used == [3, 5]

    def test_progress(self, data):
        pool, test = data
        calls = []
        state = initial_state(pool, per_class=1, budget=2, step=1)
        run_loop(state, RANDOM, parse_config(PLAIN_NET), pool, _cfg(epochs=1), test,
                 on_progress=lambda *a: calls.append(a))
        assert calls == [("active-random", 1, 3), ("active-random", 2, 3), ("active-random", 3, 3)]

    def test_budget_below_step(self, data):
        pool, test = data
        state = initial_state(pool, per_class=1, budget=2, step=3)
        with pytest.raises(ArgumentError):
            run_loop(state, RANDOM, parse_config(PLAIN_NET), pool, _cfg(), test)

    def test_missing_class_in_seed_set(self, data):
        pool, test = data
        state = ALState(labeled_idx=[0, 1], pool_idx=np.arange(2, 18), budget=2, step=1)
        with pytest.raises(ArgumentError):
            run_loop(state, RANDOM, parse_config(PLAIN_NET), pool, _cfg(), test)

    def test_uncertainty_needs_dropout_spec(self, data):
        pool, test = data
        state = initial_state(pool, per_class=1, budget=2, step=1)
        with pytest.raises(StructureError):
            run_loop(state, ENTROPY, parse_config(PLAIN_NET), pool, _cfg(), test)

    def test_state_must_cover_data(self, data):
        pool, test = data
        state = ALState(labeled_idx=[0, 6, 12], pool_idx=[1, 2], budget=1, step=1)
        with pytest.raises(ArgumentError):
            run_loop(state, RANDOM, parse_config(PLAIN_NET), pool, _cfg(), test)


class TestCurves:
    """Curve helpers and CSV output."""

    @pytest.fixture
    def curve(self):
        points = [CurvePoint(1, 3, 0.5, [0.5, 0.5]), CurvePoint(2, 6, 0.8, [0.9, 0.7]),
                  CurvePoint(3, 9, 0.9, [1.0, 0.8])]
        return LearningCurve(strategy=RANDOM, points=points)

    def test_labels_to_reach(self, curve):
        assert labels_to_reach(curve, 0.8) == 6
        assert labels_to_reach(curve, 0.95) is None

    def test_write_csv(self, tmp_path, curve):
        path = curve.write_csv(tmp_path / "curve.csv")
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["round", "labels_used", "overall_accuracy", "class_1", "class_2"]
        assert rows[2] == ["2", "6", "0.800000", "0.900000", "0.700000"]

    def test_plateau(self):
        assert _plateaued([0.5, 0.6, 0.6, 0.6], patience=2, tol=0.0)
        assert not _plateaued([0.5, 0.6, 0.7], patience=2, tol=0.0)
        assert not _plateaued([0.5, 0.6], patience=2, tol=0.0)
