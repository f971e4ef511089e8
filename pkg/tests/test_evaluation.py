"""Tests for accuracy metrics and seed summaries."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from core.errors import ArgumentError
from core.netgraph import parse_config
from trainers.base import TrainConfig
from trainers.evaluation import (
    evaluate,
    evaluate_predictions,
    format_oa,
    predict,
    silhouette_gain,
    summarize,
    trunk_features,
)
from trainers.pseudo import untrained


class TestEvaluatePredictions:
    """OA, per-class accuracy, AA and kappa from label vectors."""

    def test_perfect(self):
        ev = evaluate_predictions(np.array([1, 2, 3, 3]), np.array([1, 2, 3, 3]))
        assert ev.overall_accuracy == 1.0
        assert ev.kappa == pytest.approx(1.0)
        assert ev.per_class_accuracy == [1.0, 1.0, 1.0]

    def test_hand_computed(self):
        ev = evaluate_predictions(np.array([1, 1, 2, 2]), np.array([1, 2, 2, 2]))
        assert ev.overall_accuracy == pytest.approx(0.75)
        assert ev.per_class_accuracy == [0.5, 1.0]
        assert ev.average_accuracy == pytest.approx(0.75)
        assert ev.kappa == pytest.approx(0.5)
        assert ev.confusion.tolist() == [[1, 1], [0, 2]]
        assert ev.n_samples == 4

    def test_absent_class_excluded_from_average(self):
        ev = evaluate_predictions(np.array([1, 1, 3]), np.array([1, 2, 3]), n_classes=3)
        assert np.isnan(ev.per_class_accuracy[1])
        assert ev.average_accuracy == pytest.approx(0.75)

    def test_single_class_kappa(self):
        assert evaluate_predictions(np.array([2, 2]), np.array([2, 2]), n_classes=2).kappa == 1.0

    def test_empty(self):
        with pytest.raises(ArgumentError):
            evaluate_predictions(np.array([]), np.array([]))

    def test_length_mismatch(self):
        with pytest.raises(ArgumentError):
            evaluate_predictions(np.array([1, 2]), np.array([1]))

    def test_to_dict(self):
        data = evaluate_predictions(np.array([1, 2]), np.array([1, 1])).to_dict()
        assert data["confusion"] == [[1, 0], [1, 0]]
        assert data["overall_accuracy"] == 0.5


class TestSummaries:
    """Mean ± std over seeds."""

    def test_mean_and_sample_std(self):
        summary = summarize([0.9, 0.95, 1.0])
        assert summary.mean == pytest.approx(0.95)
        assert summary.std == pytest.approx(0.05)
        assert summary.text == "95.0 ± 5.0"

    def test_single_seed_has_no_spread(self):
        summary = summarize([0.958])
        assert summary.std is None
        assert summary.text == "95.8"

    def test_empty(self):
        with pytest.raises(ArgumentError):
            summarize([])

    def test_format(self):
        assert format_oa(0.9576, 0.0111) == "95.8 ± 1.1"
        assert format_oa(1.0) == "100.0"


class TestModelEvaluation:
    """Evaluation through a network."""

    @pytest.fixture
    def model(self):
        return untrained(parse_config("input-6 → fc-5 → softmax-3"), TrainConfig(seed=2))

    def test_predict_range(self, model, make_patches):
        predicted = predict(model, make_patches())
        assert predicted.shape == (24,)
        assert predicted.min() >= 1 and predicted.max() <= 3

    def test_evaluate_uses_softmax_width(self, model, make_patches):
        ev = evaluate(model, make_patches(n_classes=2))
        assert ev.confusion.shape == (3, 3)

    def test_unlabeled_test_set(self, model, make_patches):
        with pytest.raises(ArgumentError):
            evaluate(model, make_patches().with_labels(np.zeros(24)))

    def test_trunk_features(self, model, make_patches):
        assert trunk_features(model, make_patches()).shape == (24, 5)

    def test_silhouette_of_separated_classes(self, model, make_patches):
        raw, learned = silhouette_gain(model, make_patches())
        assert raw > 0.5
        assert -1.0 <= learned <= 1.0

    def test_silhouette_needs_two_classes(self, model, make_patches):
        with pytest.raises(ArgumentError):
            silhouette_gain(model, make_patches(n_classes=1))
