# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Tests for security curves and adversarial training."""

import json

import numpy as np
import pytest

from fuseguard.attacks import AttackBudget, AttackPlan
from fuseguard.errors import ConfigError, DatasetError
from fuseguard.harness import (
    CSV_HEADER,
    AdvTrainConfig,
    CurvePoint,
    SampleOutcome,
    SecurityCurve,
    adversarial_examples,
    adversarial_train,
    count_outcomes,
    emit,
    evaluate_curve,
    format_number,
    load_curve,
    validate_levels,
)
from fuseguard.model import Architecture, FusionNet, TrainConfig, predict

OUTCOMES = [
    SampleOutcome(label=0, predicted=0, defended=0, rejected=False),
    SampleOutcome(label=1, predicted=1, defended=3, rejected=True),
    SampleOutcome(label=2, predicted=0, defended=0, rejected=False),
    SampleOutcome(label=0, predicted=1, defended=3, rejected=True),
]


def pgd_plan(iterations=2):
    return AttackPlan(mode="pgd", budget=AttackBudget(0.1, step_size=0.02, iterations=iterations), image_size=8)


class TestCounting:
    """Counting rules per curve level."""

    def test_clean_level_counts_rejections_as_errors(self):
        point = count_outcomes(OUTCOMES, 0.0)
        assert (point.acc_undef, point.acc_def, point.rej_rate, point.n) == (0.5, 0.25, 0.5, 4)

    def test_attacked_level_counts_rejections_as_defended(self):
        point = count_outcomes(OUTCOMES, 0.1)
        assert (point.acc_undef, point.acc_def, point.rej_rate) == (0.5, 0.75, 0.5)

    def test_without_detector(self):
        outcomes = [SampleOutcome(0, 0), SampleOutcome(1, 0), SampleOutcome(2, 2)]
        point = count_outcomes(outcomes, 0.2)
        assert point.acc_def == point.acc_undef == 0.666666667
        assert point.rej_rate == 0.0

    def test_empty(self):
        with pytest.raises(DatasetError):
            count_outcomes([], 0.0)

    def test_number_format(self):
        assert format_number(0.1) == "0.1"
        assert format_number(1 / 3) == "0.333333333"
        assert format_number(8) == "8"

    @pytest.mark.parametrize("levels", [(), (0.1, 0.2), (0.0, 0.2, 0.2), (0.0, 0.3, 0.1)])
    def test_invalid_levels(self, levels):
        with pytest.raises(ConfigError):
            validate_levels(levels)


class TestCurveFiles:
    """CSV and JSON curve artifacts."""

    def curve(self):
        return SecurityCurve(
            axis="epsilon",
            points=[CurvePoint(0.0, 0.9, 0.8, 0.1, 10), CurvePoint(0.1, 0.2, 0.7, 0.5, 10)],
            mode="pgd",
        )

    def test_csv_layout(self):
        assert self.curve().to_csv() == f"{CSV_HEADER}\n0,0.9,0.8,0.1,10\n0.1,0.2,0.7,0.5,10\n"

    def test_emit_and_load(self, tmp_path):
        curve = self.curve()
        emit(curve, "csv", tmp_path / "curve.csv")
        emit(curve, "json", tmp_path / "curve.json")
        assert load_curve(tmp_path / "curve.csv").points == curve.points
        again = load_curve(tmp_path / "curve.json")
        assert again.points == curve.points
        assert again.mode == "pgd"
        assert json.loads((tmp_path / "curve.json").read_text())["axis"] == "epsilon"

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ConfigError):
            emit(self.curve(), "xml", tmp_path / "curve.xml")

    def test_bad_header(self):
        with pytest.raises(DatasetError):
            SecurityCurve.from_csv("eps,acc\n0,1\n")


class TestEvaluateCurve:
    """Sweeping attack strength over the test split."""

    def test_clean_point_matches_predictions(self, tiny_net, tiny_inputs, tiny_bounds):
        x_rgb, x_depth, labels, ids = tiny_inputs["test"]
        curve = evaluate_curve(
            tiny_net, None, pgd_plan(), (0.0, 0.05), x_rgb, x_depth, labels, ids, bounds=tiny_bounds
        )
        predicted, _ = predict(tiny_net, x_rgb, x_depth)
        assert curve.levels == [0.0, 0.05]
        assert curve.points[0].acc_undef == pytest.approx(np.mean(predicted == labels))
        assert all(p.n == 6 and p.rej_rate == 0.0 for p in curve.points)
        assert curve.axis == "epsilon"

    def test_with_detector(self, tiny_net, tiny_detector, tiny_inputs, tiny_bounds):
        x_rgb, x_depth, labels, ids = tiny_inputs["test"]
        curve = evaluate_curve(
            tiny_net, tiny_detector, pgd_plan(), (0.0, 0.1), x_rgb, x_depth, labels, ids, bounds=tiny_bounds
        )
        for point in curve.points:
            assert 0.0 <= point.acc_def <= 1.0
            assert 0.0 <= point.rej_rate <= 1.0
        assert curve.points[1].acc_def >= curve.points[1].rej_rate

    def test_worker_count_does_not_change_results(self, tiny_net, tiny_inputs, tiny_bounds):
        x_rgb, x_depth, labels, ids = tiny_inputs["train"]
        plan = AttackPlan(
            mode="patch",
            budget=AttackBudget(0.3, step_size=0.05, iterations=2, target_parts="rgb"),
            placement="random",
            image_size=8,
        )
        serial = evaluate_curve(
            tiny_net, None, plan, (0, 2, 4), x_rgb, x_depth, labels, ids, bounds=tiny_bounds, seed=3, jobs=1
        )
        parallel = evaluate_curve(
            tiny_net, None, plan, (0, 2, 4), x_rgb, x_depth, labels, ids, bounds=tiny_bounds, seed=3, jobs=3
        )
        assert serial.to_csv() == parallel.to_csv()
        assert serial.axis == "patch_side"

    def test_empty_test_set(self, tiny_net, tiny_inputs):
        x_rgb, x_depth, _, _ = tiny_inputs["test"]
        with pytest.raises(DatasetError):
            evaluate_curve(tiny_net, None, pgd_plan(), (0.0,), x_rgb[:0], x_depth[:0], np.array([]), ())


class TestAdversarialTraining:
    """The adversarial-training baseline."""

    @pytest.mark.parametrize(
        "cfg",
        [
            AdvTrainConfig(epsilons=()),
            AdvTrainConfig(epsilons=(-0.1,)),
            AdvTrainConfig(steps=0),
            AdvTrainConfig(ratio=0.0),
            AdvTrainConfig(mode="once"),
            AdvTrainConfig(parts="thermal"),
        ],
    )
    def test_invalid_config(self, cfg):
        with pytest.raises(ConfigError):
            cfg.validate()

    def test_default_step_size(self):
        budget = AdvTrainConfig(steps=10).budget(0.2)
        assert budget.step_size == pytest.approx(0.05)
        assert budget.iterations == 10

    def test_examples_stay_in_budget(self, tiny_net, tiny_inputs, tiny_bounds, rng):
        x_rgb, x_depth, labels, _ = tiny_inputs["train"]
        cfg = AdvTrainConfig(epsilons=(0.05,), steps=2, ratio=0.5)
        adv_rgb, adv_depth, adv_labels = adversarial_examples(
            tiny_net, x_rgb, x_depth, labels, cfg, rng, bounds=tiny_bounds
        )
        assert len(adv_labels) == 9
        assert adv_rgb.shape == (9, 3, 8, 8)
        assert set(adv_labels) <= {0, 1, 2}

    def test_tags_result(self, tiny_net, tiny_inputs, tiny_bounds):
        x_rgb, x_depth, labels, _ = tiny_inputs["train"]
        result = adversarial_train(
            tiny_net,
            x_rgb,
            x_depth,
            labels,
            AdvTrainConfig(epsilons=(0.0, 0.05), steps=2, ratio=0.5, mode="fixed"),
            TrainConfig(epochs=2),
            bounds=tiny_bounds,
        )
        assert result.net.arch.tag == "at"
        assert len(result.history.epoch_losses) == 2

    def test_zero_epsilons_train_clean(self, tiny_net, tiny_inputs, caplog):
        x_rgb, x_depth, labels, _ = tiny_inputs["train"]
        with caplog.at_level("INFO", logger="fuseguard.harness"):
            result = adversarial_train(
                tiny_net, x_rgb, x_depth, labels, AdvTrainConfig(epsilons=(0.0,)), TrainConfig(epochs=1)
            )
        assert result.net.arch.tag == "at"
        assert "without adversarial examples" in caplog.text

    def test_needs_rgbd(self, tiny_arch, tiny_inputs):
        x_rgb, x_depth, labels, _ = tiny_inputs["train"]
        net = FusionNet.initialize(Architecture.from_dict({**tiny_arch.to_dict(), "variant": "rgb"}))
        with pytest.raises(ConfigError):
            adversarial_train(net, x_rgb, x_depth, labels, AdvTrainConfig(), TrainConfig(epochs=1))
