# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Tests for centroids, threshold calibration and the defended classifier."""

import numpy as np
import pytest

from fuseguard.detector import (
    DetectorState,
    anomaly_score,
    calibrate,
    calibrate_threshold,
    centroids_from_features,
    defend,
    defended_predict,
    defended_scores,
    false_positive_rate,
    scores_from_features,
    soft_reject_score,
    with_threshold,
)
from fuseguard.errors import CalibrationError, CheckpointError, ConfigError
from fuseguard.model import predict


def brute_force_threshold(scores, r, rho, grid_steps):
    for i in range(1, grid_steps + 1):
        if false_positive_rate(scores, rho * i) <= r:
            return rho * i
    return None


class TestCalibrateThreshold:
    """Grid search for the rejection threshold."""

    def test_ten_scores(self):
        """Rejecting one of ten scores needs a threshold at the ninth."""
        scores = np.arange(1.0, 11.0)
        beta = calibrate_threshold(scores, r=0.1, rho=1e-5)
        assert 9.0 <= beta < 9.0 + 2e-5
        assert false_positive_rate(scores, beta) <= 0.1
        assert false_positive_rate(scores, beta - 1e-5) > 0.1

    def test_full_rate_takes_first_grid_point(self):
        assert calibrate_threshold(np.array([3.0, 4.0]), r=1.0, rho=0.25) == 0.25

    def test_equal_scores(self):
        beta = calibrate_threshold(np.full(20, 0.5), r=0.1, rho=1e-3)
        assert beta == pytest.approx(0.5)
        assert false_positive_rate(np.full(20, 0.5), beta) == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            rho = float(rng.choice([0.01, 0.05, 0.1, 0.37, 0.5, 1.0]))
            scores = rng.uniform(0, 15, size=int(rng.integers(1, 40)))
            if rng.random() < 0.3:
                # scores sitting exactly on grid points
                scores = np.round(scores / rho) * rho
            r = float(rng.choice([0.02, 0.05, 0.1, 0.25, 0.5, 1.0]))
            grid_steps = int(rng.integers(1, int(16 / rho) + 2))
            expected = brute_force_threshold(scores, r, rho, grid_steps)
            if expected is None:
                with pytest.raises(CalibrationError):
                    calibrate_threshold(scores, r, rho=rho, grid_steps=grid_steps)
            else:
                assert calibrate_threshold(scores, r, rho=rho, grid_steps=grid_steps) == expected

    def test_unreachable_rate(self):
        with pytest.raises(CalibrationError) as exc_info:
            calibrate_threshold(np.array([1.0, 100.0]), r=0.1, rho=1.0, grid_steps=10)
        assert exc_info.value.context["max_grid_value"] == 10.0
        assert exc_info.value.context["residual_fpr"] == 0.5

    @pytest.mark.parametrize("kwargs", [{"r": 0.0}, {"r": 1.5}, {"rho": 0.0}, {"grid_steps": 0}])
    def test_invalid_parameters(self, kwargs):
        with pytest.raises(ConfigError):
            calibrate_threshold(np.array([1.0, 2.0]), **kwargs)

    def test_empty_scores(self):
        with pytest.raises(CalibrationError):
            calibrate_threshold(np.array([]))


class TestCentroids:
    """Per-class centroids and anomaly scores."""

    def test_class_means(self):
        feats = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 4.0]])
        centroids = centroids_from_features(feats, np.array([0, 0, 1]), 2)
        np.testing.assert_allclose(centroids, [[1.0, 0.0], [0.0, 4.0]])

    def test_empty_class(self):
        with pytest.raises(CalibrationError) as exc_info:
            centroids_from_features(np.zeros((2, 3)), np.array([0, 0]), 2)
        assert exc_info.value.context["class"] == 1

    def test_score_uses_predicted_class(self):
        centroids = np.array([[0.0, 0.0], [10.0, 0.0]])
        feats = np.array([[3.0, 4.0], [3.0, 4.0]])
        probs = np.array([[0.9, 0.1], [0.2, 0.8]])
        np.testing.assert_allclose(scores_from_features(feats, probs, centroids), [5.0, np.hypot(7, 4)])


class TestCalibrate:
    """End-to-end calibration on a network."""

    def test_achieved_rate(self, tiny_detector):
        assert tiny_detector.calibrated
        assert tiny_detector.achieved_fpr <= 0.2
        assert tiny_detector.calibration_size == 18
        assert tiny_detector.rejection_label == 3

    def test_holdout_split(self, tiny_net, tiny_inputs):
        x_rgb, x_depth, labels, _ = tiny_inputs["train"]
        state = calibrate(tiny_net, x_rgb, x_depth, labels, fpr=0.5, split="holdout")
        assert state.calibration_split == "holdout"
        assert state.calibration_size == 3

    def test_invalid_lambda(self, tiny_net, tiny_inputs):
        x_rgb, x_depth, labels, _ = tiny_inputs["train"]
        with pytest.raises(ConfigError):
            calibrate(tiny_net, x_rgb, x_depth, labels, lam=0.0)

    def test_save_and_load(self, tmp_path, tiny_detector):
        path = tmp_path / "detector.json"
        tiny_detector.save(path)
        again = DetectorState.load(path)
        np.testing.assert_allclose(again.centroids, tiny_detector.centroids)
        assert again.beta == tiny_detector.beta
        assert again.lam == tiny_detector.lam

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            DetectorState.load(tmp_path / "missing.json")

    def test_anomaly_score_single_matches_batch(self, tiny_net, tiny_detector, tiny_inputs):
        x_rgb, x_depth, _, _ = tiny_inputs["test"]
        batch = anomaly_score(tiny_net, tiny_detector, x_rgb, x_depth)
        single = anomaly_score(tiny_net, tiny_detector, x_rgb[1], x_depth[1])
        assert single == pytest.approx(batch[1], rel=1e-4, abs=1e-6)


class TestDefendedClassifier:
    """Rejection class on top of the undefended scores."""

    def test_soft_score_at_threshold(self):
        assert soft_reject_score(2.0, beta=2.0).item() == pytest.approx(0.5)
        assert soft_reject_score(2.5, beta=2.0).item() > 0.99
        with pytest.raises(ConfigError):
            soft_reject_score(1.0, beta=1.0, lam=0.0)

    def test_defended_scores_sum_to_one(self):
        s_prime = defended_scores(np.array([0.2, 0.3, 0.5]), 0.4).data
        np.testing.assert_allclose(s_prime, [0.12, 0.18, 0.3, 0.4])
        assert s_prime.sum() == pytest.approx(1.0)

    def test_hard_mode(self):
        state = DetectorState(centroids=np.zeros((2, 1)), beta=1.0)
        probs = np.array([[0.7, 0.3], [0.4, 0.6]])
        s_prime, labels = defend(probs, np.array([0.5, 1.5]), state)
        np.testing.assert_array_equal(labels, [0, 2])
        np.testing.assert_allclose(s_prime[1], [0.0, 0.0, 1.0])

    def test_soft_mode(self):
        state = DetectorState(centroids=np.zeros((2, 1)), beta=1.0, lam=30.0)
        s_prime, _ = defend(np.array([[0.5, 0.5]]), np.array([1.0]), state, "soft")
        np.testing.assert_allclose(s_prime[0], [0.25, 0.25, 0.5])

    def test_uncalibrated(self, tiny_net, tiny_inputs):
        x_rgb, x_depth, _, _ = tiny_inputs["test"]
        with pytest.raises(CalibrationError):
            defended_predict(tiny_net, DetectorState(centroids=np.zeros((3, 5))), x_rgb, x_depth)

    def test_infinite_threshold_accepts_everything(self, tiny_net, tiny_detector, tiny_inputs):
        x_rgb, x_depth, _, _ = tiny_inputs["test"]
        _, defended = defended_predict(tiny_net, with_threshold(tiny_detector, np.inf), x_rgb, x_depth)
        predicted, _ = predict(tiny_net, x_rgb, x_depth)
        np.testing.assert_array_equal(defended, predicted)

    def test_negative_threshold_rejects_everything(self, tiny_net, tiny_detector, tiny_inputs):
        x_rgb, x_depth, _, _ = tiny_inputs["test"]
        _, label = defended_predict(tiny_net, with_threshold(tiny_detector, -1.0), x_rgb[0], x_depth[0])
        assert label == tiny_detector.rejection_label
