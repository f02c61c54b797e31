# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Tests for PGD, patch and defense-aware attacks."""

import numpy as np
import pytest

from fuseguard.attacks import (
    AttackBudget,
    AttackPlan,
    PatchSpec,
    adaptive_loss,
    adaptive_patch_attack,
    adaptive_pgd_attack,
    apply_patch,
    make_mask,
    margin_loss,
    patch_attack,
    pgd_attack,
    pgd_batch,
    project_linf,
    run_attack,
)
from fuseguard.detector import DetectorState, anomaly_score, with_threshold
from fuseguard.errors import CalibrationError, ConfigError, GradientError, ShapeError
from fuseguard.tensor import Tape, Tensor

SLACK = 1e-6


@pytest.fixture()
def sample(tiny_inputs):
    x_rgb, x_depth, labels, _ = tiny_inputs["test"]
    return x_rgb[0], x_depth[0], int(labels[0])


class TestBuildingBlocks:
    """Masks, projections and the margin loss."""

    def test_mask(self):
        mask = make_mask(8, 3, 1, 2)
        assert mask.shape == (3, 8, 8)
        assert mask.sum() == 27
        assert mask[0, 1, 2] == 1 and mask[0, 4, 2] == 0

    def test_mask_out_of_bounds(self):
        with pytest.raises(ShapeError):
            make_mask(8, 4, 6, 0)

    def test_patch_spec(self):
        assert PatchSpec(4, 8).origin == (2, 2)
        with pytest.raises(ShapeError):
            PatchSpec(9, 8)
        with pytest.raises(ConfigError):
            PatchSpec(4, 8, placement="corner")

    def test_random_shift_stays_inside(self, rng):
        patch = PatchSpec(3, 8, placement="random")
        top, left = patch.origin
        for _ in range(50):
            dy, dx = patch.draw_shift(rng)
            assert 0 <= top + dy <= 5 and 0 <= left + dx <= 5
        assert PatchSpec(3, 8).draw_shift(rng) == (0, 0)

    def test_margin_loss(self):
        scores = np.array([0.2, 0.5, 0.3])
        assert margin_loss(scores, 1).item() == pytest.approx(0.2)
        assert margin_loss(scores, 0).item() == pytest.approx(-0.3)

    def test_margin_gradient(self):
        s = Tensor(np.array([0.2, 0.5, 0.3]), requires_grad=True)
        with Tape():
            margin_loss(s, 1).backward()
        np.testing.assert_array_equal(s.grad, [0.0, 1.0, -1.0])

    def test_margin_needs_valid_label(self):
        with pytest.raises(ShapeError):
            margin_loss(np.array([0.5, 0.5]), 2)

    def test_project_linf(self):
        np.testing.assert_array_equal(project_linf(np.array([-0.3, 0.05, 0.2]), 0.1), [-0.1, 0.05, 0.1])

    def test_apply_patch(self):
        rng = np.random.default_rng(1)
        x, delta = rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 8, 8))
        mask = make_mask(8, 2, 3, 3)
        out = apply_patch(x, delta, mask).data
        inside = mask.astype(bool)
        np.testing.assert_array_equal(out[~inside], x[~inside])
        np.testing.assert_array_equal(out[inside], delta[inside])

    def test_apply_patch_with_shift(self):
        x, delta = np.zeros((3, 8, 8)), np.ones((3, 8, 8))
        out = apply_patch(x, delta, make_mask(8, 2, 3, 3), shift=(2, -1)).data
        assert out[:, 5:7, 2:4].min() == 1.0
        assert out.sum() == 12.0

    def test_apply_patch_rejects_soft_mask(self):
        with pytest.raises(ShapeError):
            apply_patch(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)), np.full((3, 8, 8), 0.5))

    @pytest.mark.parametrize(
        "budget, error",
        [
            (AttackBudget(0.1, iterations=0), GradientError),
            (AttackBudget(-0.1), ConfigError),
            (AttackBudget(0.1, step_size=0.0), ConfigError),
            (AttackBudget(0.1, target_parts="thermal"), ConfigError),
            (AttackBudget(0.1, step_rule="adam"), ConfigError),
        ],
    )
    def test_budget_validation(self, budget, error):
        with pytest.raises(error):
            budget.validate()


class TestPGD:
    """Full-image ℓ∞ PGD."""

    def test_iterates_stay_feasible(self, tiny_net, tiny_bounds, sample):
        x_rgb, x_depth, y = sample
        seen = []

        def check(it, deltas):
            seen.append(it)
            assert np.abs(deltas["rgb"]).max() <= 0.05 + SLACK
            assert (x_rgb + deltas["rgb"] >= tiny_bounds.rgb_low - SLACK).all()
            assert (x_rgb + deltas["rgb"] <= tiny_bounds.rgb_high + SLACK).all()

        budget = AttackBudget(0.05, step_size=0.02, iterations=6)
        result = pgd_attack(tiny_net, x_rgb, x_depth, y, budget, bounds=tiny_bounds, callback=check)
        assert seen == list(range(6))
        assert len(result.loss_trace) == 6
        assert result.linf_norm <= 0.05 + SLACK

    def test_margin_decreases(self, tiny_net, tiny_bounds, sample):
        x_rgb, x_depth, y = sample
        budget = AttackBudget(0.2, step_size=0.01, iterations=10)
        result = pgd_attack(tiny_net, x_rgb, x_depth, y, budget, bounds=tiny_bounds)
        final = margin_loss(tiny_net.forward(result.x_rgb, result.x_depth).scores, y).item()
        assert final < result.loss_trace[0]
        assert result.success == (result.adv_label != y)

    def test_single_part_leaves_other_untouched(self, tiny_net, tiny_bounds, sample):
        x_rgb, x_depth, y = sample
        budget = AttackBudget(0.1, step_size=0.05, iterations=3, target_parts="depth")
        result = pgd_attack(tiny_net, x_rgb, x_depth, y, budget, bounds=tiny_bounds)
        assert set(result.delta) == {"depth"}
        np.testing.assert_array_equal(result.x_rgb, x_rgb)
        assert not np.array_equal(result.x_depth, x_depth)

    def test_zero_budget_is_clean(self, tiny_net, sample):
        x_rgb, x_depth, y = sample
        result = pgd_attack(tiny_net, x_rgb, x_depth, y, AttackBudget(0.0, iterations=2))
        np.testing.assert_array_equal(result.x_rgb, x_rgb)
        assert result.adv_label == result.clean_label

    def test_gradient_step_rule(self, tiny_net, sample):
        x_rgb, x_depth, y = sample
        budget = AttackBudget(0.1, step_size=1.0, iterations=2, step_rule="gradient")
        result = pgd_attack(tiny_net, x_rgb, x_depth, y, budget)
        assert result.linf_norm <= 0.1 + SLACK

    def test_deterministic(self, tiny_net, tiny_bounds, sample):
        x_rgb, x_depth, y = sample
        budget = AttackBudget(0.1, step_size=0.02, iterations=4)
        a = pgd_attack(tiny_net, x_rgb, x_depth, y, budget, bounds=tiny_bounds)
        b = pgd_attack(tiny_net, x_rgb, x_depth, y, budget, bounds=tiny_bounds)
        np.testing.assert_array_equal(a.delta["rgb"], b.delta["rgb"])
        assert a.loss_trace == b.loss_trace

    def test_needs_single_samples(self, tiny_net, tiny_inputs):
        x_rgb, x_depth, labels, _ = tiny_inputs["test"]
        with pytest.raises(ShapeError):
            pgd_attack(tiny_net, x_rgb, x_depth, 0, AttackBudget(0.1, iterations=1))

    def test_batch_version_is_feasible(self, tiny_net, tiny_bounds, tiny_inputs):
        x_rgb, x_depth, labels, _ = tiny_inputs["test"]
        adv_rgb, adv_depth = pgd_batch(
            tiny_net, x_rgb, x_depth, labels, AttackBudget(0.05, step_size=0.02, iterations=3), bounds=tiny_bounds
        )
        assert adv_rgb.shape == x_rgb.shape
        assert np.abs(adv_rgb - x_rgb).max() <= 0.05 + SLACK
        assert np.abs(adv_depth - x_depth).max() <= 0.05 + SLACK
        assert (adv_rgb <= tiny_bounds.rgb_high[None] + SLACK).all()


class TestPatch:
    """Patch attacks."""

    def test_outside_pixels_are_unchanged(self, tiny_net, tiny_bounds, sample, rng):
        x_rgb, x_depth, y = sample
        patch = PatchSpec(4, 8, placement="random")
        budget = AttackBudget(0.3, step_size=0.05, iterations=4, target_parts="rgb")
        result = patch_attack(tiny_net, x_rgb, x_depth, y, patch, budget, bounds=tiny_bounds, rng=rng)
        inside = patch.mask().astype(bool)
        np.testing.assert_array_equal(result.x_rgb[~inside], x_rgb[~inside])
        np.testing.assert_array_equal(result.x_depth, x_depth)
        assert (result.x_rgb[inside] <= tiny_bounds.rgb_high[inside] + SLACK).all()

    def test_patch_content_is_bounded(self, tiny_net, tiny_bounds, sample):
        x_rgb, x_depth, y = sample
        patch = PatchSpec(2, 8)
        budget = AttackBudget(0.1, step_size=0.05, iterations=3, target_parts="rgb")
        result = patch_attack(tiny_net, x_rgb, x_depth, y, patch, budget, bounds=tiny_bounds)
        inside = patch.mask().astype(bool)
        assert set(result.delta) == {"rgb"}
        assert not result.delta["rgb"][~inside].any()
        assert np.abs(result.delta["rgb"]).max() <= 0.1 + SLACK
        np.testing.assert_array_equal(result.x_depth, x_depth)

    @pytest.mark.parametrize("parts", ["depth", "both"])
    def test_patches_cover_rgb_only(self, tiny_net, tiny_detector, sample, parts):
        x_rgb, x_depth, y = sample
        budget = AttackBudget(0.1, iterations=1, target_parts=parts)
        with pytest.raises(ConfigError):
            patch_attack(tiny_net, x_rgb, x_depth, y, PatchSpec(2, 8), budget)
        with pytest.raises(ConfigError):
            adaptive_patch_attack(tiny_net, tiny_detector, x_rgb, x_depth, y, PatchSpec(2, 8), budget)
        with pytest.raises(ConfigError):
            AttackPlan(mode="adaptive-patch", budget=budget, image_size=8)

    def test_every_iterate_respects_support_and_budget(self, tiny_net, tiny_bounds, sample):
        x_rgb, x_depth, y = sample
        rng = np.random.default_rng(11)
        low, high = tiny_bounds.rgb_low, tiny_bounds.rgb_high
        checked = 0
        for _ in range(1000):
            side = int(rng.integers(1, 9))
            eps = float(rng.uniform(0.01, 0.6))
            patch = PatchSpec(side, 8, placement=str(rng.choice(["center", "random"])))
            outside = ~patch.mask().astype(bool)

            def check(it, deltas):
                nonlocal checked
                d = deltas["rgb"]
                assert not d[outside].any()
                assert np.abs(d).max() <= eps + SLACK
                assert (d >= low - SLACK).all() and (d <= high + SLACK).all()
                checked += 1

            budget = AttackBudget(eps, step_size=eps / 2, iterations=2, target_parts="rgb")
            patch_attack(tiny_net, x_rgb, x_depth, y, patch, budget, bounds=tiny_bounds, rng=rng, callback=check)
        assert checked == 2000

    def _patched_accuracy(self, net, inputs, bounds, side, eps):
        x_rgb, x_depth, labels, _ = inputs
        budget = AttackBudget(eps, step_size=eps / 5, iterations=30, target_parts="rgb")
        patch = PatchSpec(side, 8)
        hits = [
            patch_attack(net, x_rgb[i], x_depth[i], int(labels[i]), patch, budget, bounds=bounds).adv_label
            == labels[i]
            for i in range(len(labels))
        ]
        return float(np.mean(hits))

    def test_full_image_patch_is_at_least_as_strong(self, tiny_net, tiny_bounds, tiny_inputs):
        full = self._patched_accuracy(tiny_net, tiny_inputs["train"], tiny_bounds, 8, 1.0)
        quarter = self._patched_accuracy(tiny_net, tiny_inputs["train"], tiny_bounds, 2, 1.0)
        assert full <= quarter

    def test_larger_epsilon_succeeds_at_least_as_often(self, tiny_net, tiny_bounds, tiny_inputs):
        weak = self._patched_accuracy(tiny_net, tiny_inputs["train"], tiny_bounds, 4, 0.05)
        strong = self._patched_accuracy(tiny_net, tiny_inputs["train"], tiny_bounds, 4, 0.3)
        assert 1.0 - strong >= 1.0 - weak

    def test_zero_side_is_clean(self, tiny_net, sample):
        x_rgb, x_depth, y = sample
        budget = AttackBudget(0.1, iterations=5, target_parts="rgb")
        result = patch_attack(tiny_net, x_rgb, x_depth, y, PatchSpec(0, 8), budget)
        np.testing.assert_array_equal(result.x_rgb, x_rgb)
        assert len(result.loss_trace) == 1


class TestAdaptive:
    """Defense-aware attacks against the rejection class."""

    def test_requires_calibration(self, tiny_net, sample):
        x_rgb, x_depth, y = sample
        with pytest.raises(CalibrationError):
            adaptive_loss(tiny_net, DetectorState(centroids=np.zeros((3, 5))), x_rgb, x_depth, y)

    def test_far_threshold_reduces_to_margin(self, tiny_net, tiny_detector, sample):
        x_rgb, x_depth, y = sample
        detector = with_threshold(tiny_detector, 1e6)
        scores = tiny_net.forward(x_rgb, x_depth).scores
        expected = margin_loss(scores, y).item()
        for competitor in ("rescaled", "raw"):
            loss = adaptive_loss(tiny_net, detector, x_rgb, x_depth, y, competitor=competitor)
            assert loss.item() == pytest.approx(expected, abs=1e-6)

    def test_certain_rejection(self, tiny_net, tiny_detector, sample):
        x_rgb, x_depth, y = sample
        detector = with_threshold(tiny_detector, -1e6)
        scores = tiny_net.forward(x_rgb, x_depth).scores.data
        rescaled = adaptive_loss(tiny_net, detector, x_rgb, x_depth, y).item()
        raw = adaptive_loss(tiny_net, detector, x_rgb, x_depth, y, competitor="raw").item()
        assert rescaled == pytest.approx(1.0, abs=1e-6)
        assert raw == pytest.approx(1.0 - np.delete(scores, y).max(), abs=1e-6)

    @pytest.mark.parametrize("competitor", ["rescaled", "raw"])
    def test_loss_grows_with_anomaly_score(self, tiny_net, tiny_detector, sample, competitor):
        x_rgb, x_depth, y = sample
        energy = anomaly_score(tiny_net, tiny_detector, x_rgb, x_depth)
        # E enters only through E − β; decreasing β sweeps E − β upwards
        betas = energy + np.linspace(0.1, -0.1, 9)
        losses = [
            adaptive_loss(tiny_net, with_threshold(tiny_detector, b), x_rgb, x_depth, y, competitor=competitor).item()
            for b in betas
        ]
        assert all(later > earlier for earlier, later in zip(losses, losses[1:]))

    def test_rejection_never_counts_as_success(self, tiny_net, tiny_detector, sample):
        x_rgb, x_depth, y = sample
        for beta in (-1e6, 1e6):
            loss = adaptive_loss(tiny_net, with_threshold(tiny_detector, beta), x_rgb, x_depth, y)
            predicted = int(np.argmax(tiny_net.forward(x_rgb, x_depth).scores.data))
            accepted_wrong = beta > 0 and predicted != y
            assert (loss.item() < 0) == accepted_wrong

    def test_unknown_competitor(self, tiny_net, tiny_detector, sample):
        x_rgb, x_depth, y = sample
        with pytest.raises(ConfigError):
            adaptive_loss(tiny_net, tiny_detector, x_rgb, x_depth, y, competitor="best")

    def test_adaptive_pgd_reports_defense(self, tiny_net, tiny_detector, tiny_bounds, sample):
        x_rgb, x_depth, y = sample
        budget = AttackBudget(0.1, step_size=0.02, iterations=4)
        result = adaptive_pgd_attack(tiny_net, tiny_detector, x_rgb, x_depth, y, budget, bounds=tiny_bounds)
        assert result.defended_label is not None
        assert result.rejected == (result.defended_label == 3)
        assert result.success == (result.defended_label not in (y, 3))
        assert result.linf_norm <= 0.1 + SLACK

    def test_adaptive_patch(self, tiny_net, tiny_detector, tiny_bounds, sample, rng):
        x_rgb, x_depth, y = sample
        patch = PatchSpec(3, 8, placement="random")
        budget = AttackBudget(0.2, step_size=0.05, iterations=3, target_parts="rgb")
        result = adaptive_patch_attack(
            tiny_net, tiny_detector, x_rgb, x_depth, y, patch, budget, bounds=tiny_bounds, rng=rng
        )
        inside = patch.mask().astype(bool)
        np.testing.assert_array_equal(result.x_rgb[~inside], x_rgb[~inside])
        assert len(result.loss_trace) == 3


class TestDispatch:
    """Attack plans and run_attack."""

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            AttackPlan(mode="fgsm", budget=AttackBudget(0.1))

    def test_plan_levels(self):
        plan = AttackPlan(
            mode="patch", budget=AttackBudget(0.1, target_parts="rgb"), patch_epsilon=0.3, image_size=8
        )
        budget, patch = plan.at(4)
        assert (budget.epsilon, patch.side, plan.axis) == (0.3, 4, "patch_side")
        budget, patch = AttackPlan(mode="pgd", budget=AttackBudget(0.1)).at(0.25)
        assert budget.epsilon == 0.25 and patch is None

    def test_adaptive_needs_detector(self, tiny_net, sample):
        x_rgb, x_depth, y = sample
        plan = AttackPlan(mode="adaptive-pgd", budget=AttackBudget(0.1, iterations=1), image_size=8)
        with pytest.raises(ConfigError):
            run_attack(plan, 0.1, tiny_net, x_rgb, x_depth, y)

    def test_record(self, tiny_net, tiny_detector, sample):
        x_rgb, x_depth, y = sample
        plan = AttackPlan(mode="pgd", budget=AttackBudget(0.1, iterations=2), image_size=8)
        record = run_attack(plan, 0.1, tiny_net, x_rgb, x_depth, y, detector=tiny_detector).to_record("c0-s003", y)
        assert record["id"] == "c0-s003"
        assert len(record["loss_trace"]) == 2
        assert record["defended_label"] is not None
