# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Property-based tests for fuseguard.

This module contains property-based tests using Hypothesis to verify
invariants of the threshold search, counting rules, projections and
similarity estimators across a wide range of inputs.
"""

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from fuseguard import tensor as T
from fuseguard.attacks import margin_loss, project_linf
from fuseguard.cka import cka
from fuseguard.detector import calibrate_threshold, defended_scores, false_positive_rate
from fuseguard.harness import SampleOutcome, count_outcomes, format_number
from fuseguard.seeding import derive_seed
from fuseguard.tensor import Tape, Tensor

scores_lists = st.lists(
    st.floats(min_value=0.0, max_value=20.0, allow_nan=False), min_size=1, max_size=40
)
rates = st.sampled_from([0.01, 0.05, 0.1, 0.2, 0.5, 1.0])


class TestThresholdProperties:
    """Properties of the rejection threshold search."""

    @given(scores_lists, rates)
    def test_threshold_meets_rate(self, scores, r):
        """The chosen threshold never rejects more than the allowed fraction."""
        beta = calibrate_threshold(np.array(scores), r, rho=0.25, grid_steps=100)
        assert false_positive_rate(np.array(scores), beta) <= r

    @given(scores_lists, rates)
    def test_threshold_is_smallest_grid_point(self, scores, r):
        """The grid point below the threshold rejects too many samples."""
        beta = calibrate_threshold(np.array(scores), r, rho=0.25, grid_steps=100)
        i = round(beta / 0.25)
        assert beta == 0.25 * i
        if i > 1:
            assert false_positive_rate(np.array(scores), 0.25 * (i - 1)) > r


class TestCountingProperties:
    """Properties of the curve counting rules."""

    @given(
        st.lists(
            st.tuples(st.integers(0, 2), st.integers(0, 2), st.booleans()), min_size=1, max_size=30
        )
    )
    def test_rejections_move_between_columns(self, rows):
        """Above level 0 every rejection counts as defended; at level 0 none does."""
        outcomes = [
            SampleOutcome(label=y, predicted=p, defended=3 if rej else p, rejected=rej) for y, p, rej in rows
        ]
        clean, attacked = count_outcomes(outcomes, 0.0), count_outcomes(outcomes, 0.1)
        assert attacked.acc_def == pytest.approx(clean.acc_def + clean.rej_rate, abs=1e-8)
        assert attacked.acc_def >= attacked.rej_rate

    @given(st.just(0.0) | st.floats(min_value=1e-6, max_value=1e6))
    def test_number_format_is_stable(self, value):
        """Formatting a formatted number changes nothing."""
        text = format_number(value)
        assert format_number(float(text)) == text


class TestAttackProperties:
    """Properties of projections and losses."""

    @given(st.integers(0, 2**32 - 1), st.floats(min_value=0.0, max_value=2.0))
    def test_projection_is_bounded_and_idempotent(self, seed, epsilon):
        delta = np.random.default_rng(seed).normal(size=(3, 4, 4)).astype(np.float32)
        once = project_linf(delta, epsilon)
        assert np.abs(once).max() <= np.float32(epsilon)
        np.testing.assert_array_equal(project_linf(once, epsilon), once)

    @given(
        st.lists(st.floats(min_value=-5, max_value=5), min_size=2, max_size=6, unique=True),
        st.data(),
    )
    def test_margin_sign_matches_prediction(self, scores, data):
        """The margin is positive exactly when the true class wins."""
        y = data.draw(st.integers(0, len(scores) - 1))
        margin = margin_loss(np.array(scores), y).item()
        assume(margin != 0.0)
        assert (margin > 0) == (int(np.argmax(scores)) == y)

    @given(st.integers(0, 2**32 - 1), st.floats(min_value=0.0, max_value=1.0))
    def test_defended_scores_stay_normalized(self, seed, reject):
        probs = np.random.default_rng(seed).dirichlet(np.ones(4))
        s_prime = defended_scores(probs, reject).data
        assert s_prime.shape == (5,)
        assert s_prime.sum() == pytest.approx(1.0)


class TestSimilarityProperties:
    """Properties of CKA."""

    @settings(max_examples=30)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["linear", "rbf"]))
    def test_cka_symmetric_and_bounded(self, seed, kernel):
        rng = np.random.default_rng(seed)
        X, Z = rng.normal(size=(10, 4)), rng.normal(size=(10, 3))
        value = cka(X, Z, kernel)
        assert value == pytest.approx(cka(Z, X, kernel))
        assert -1e-9 <= value <= 1.0 + 1e-9

    @given(st.integers(0, 10**6), st.text(max_size=20), st.text(max_size=20))
    def test_seed_derivation(self, seed, a, b):
        """Derived seeds are deterministic and fit in 63 bits."""
        assert derive_seed(seed, a, b) == derive_seed(seed, a, b)
        assert 0 <= derive_seed(seed, a, b) < 2**63


class TestTensorProperties:
    """Algebraic properties of the tape."""

    @given(st.integers(0, 2**32 - 1), st.floats(min_value=-50.0, max_value=50.0))
    def test_softmax_normalized_and_shift_invariant(self, seed, shift):
        z = np.random.default_rng(seed).normal(size=(3, 5))
        probs = T.softmax(Tensor(z), axis=1).data
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(3))
        np.testing.assert_allclose(T.softmax(Tensor(z + shift), axis=1).data, probs, atol=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_product_rule(self, seed):
        """The gradient of sum(x * y) with respect to x is y."""
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        y = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        with Tape():
            T.sum(T.mul(x, y)).backward()
        np.testing.assert_allclose(x.grad, y.data)
        np.testing.assert_allclose(y.grad, x.data)
