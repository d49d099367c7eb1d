"""Loss values against scalar oracles, gradient sign facts, and the
stabilized-softmax equivalence."""

import numpy as np
import pytest

from crhash.gradcheck import check_nhd_loss, check_pseudo_label_loss
from crhash.losses import (
    attention_loss,
    dot_product_loss,
    grad_wrt_negative_distance,
    grad_wrt_positive_distance,
    nhd_loss,
    nhd_loss_from_distances,
    pseudo_label_loss,
    total_loss,
)


def naive_distance_loss(d_pos, d_negatives, s):
    """Direct, unstabilized evaluation of the distance-space objective."""
    num = np.exp(s * (2.0 - d_pos) ** 2 / 4.0)
    den = num + sum(np.exp(s * (1.0 - d) ** 2) for d in d_negatives)
    return -np.log(num / den)


def two_row_memory(s1):
    """A (v, W) pair whose saturated distances are exactly d_ii=0, d_01=1.

    Row 0 equals v (distance 0); row 1 is its negation, so the distance is
    twice the common saturation level, which s1 pins at 1/2.
    """
    v = np.array([1.0, 1.0])
    rows = np.array([[1.0, 1.0], [-1.0, -1.0]])
    level = np.tanh(s1 / np.sqrt(2.0))
    assert level == pytest.approx(0.5, abs=1e-12)
    return v, rows


S1_HALF = np.sqrt(2.0) * np.arctanh(0.5)  # saturation level exactly 1/2


class TestNhdLossValues:
    def test_satisfied_positive_single_neutral_negative(self):
        v, rows = two_row_memory(S1_HALF)
        out = nhd_loss(v, 0, rows, s=8.0, s1=S1_HALF)
        expected = np.log1p(np.exp(-8.0))  # softplus(-8)
        assert out.value == pytest.approx(expected, rel=1e-9)
        assert expected == pytest.approx(3.354063e-4, rel=1e-6)

    def test_worst_positive_distance_value(self):
        for d_neg in (0.0, 2.0):
            value = nhd_loss_from_distances(2.0, [d_neg], s=8.0)
            assert value == pytest.approx(np.log1p(np.exp(8.0)), rel=1e-12)
            assert value == pytest.approx(8.000335, abs=1e-6)

    def test_matches_naive_evaluation(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k = int(rng.integers(1, 8))
            d_pos = float(rng.uniform(0, 2))
            d_neg = rng.uniform(0, 2, size=k)
            s = float(rng.uniform(0.5, 8))
            assert nhd_loss_from_distances(d_pos, d_neg, s) == pytest.approx(
                naive_distance_loss(d_pos, d_neg, s), rel=1e-10
            )

    def test_value_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 10))
            l = int(rng.integers(2, 8))
            out = nhd_loss(rng.normal(size=l), 0, rng.normal(size=(n, l)), 4.0, 1.0)
            assert out.value >= 0.0

    def test_invalid_index(self):
        with pytest.raises(ValueError):
            nhd_loss(np.ones(2), 5, np.ones((2, 2)), 8.0, 8.0)

    def test_gradcheck_hundred_instances(self):
        result = check_nhd_loss(seed=11, n_instances=100)
        assert result.passed, f"max rel err {result.max_rel_err}"


class TestDistanceDerivatives:
    def test_positive_grad_zero_at_two(self):
        assert grad_wrt_positive_distance(2.0, [0.3, 1.2], 8.0) == 0.0

    def test_positive_grad_never_negative(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            k = int(rng.integers(1, 10))
            g = grad_wrt_positive_distance(
                float(rng.uniform(0, 2)), rng.uniform(0, 2, size=k), float(rng.uniform(0.5, 16))
            )
            assert g >= 0.0

    def test_negative_grad_zero_at_one(self):
        assert grad_wrt_negative_distance(0.5, [1.0, 0.2], 0, 8.0) == 0.0

    def test_negative_grad_sign_tracks_distance(self):
        assert grad_wrt_negative_distance(0.5, [1.5], 0, 8.0) > 0
        assert grad_wrt_negative_distance(0.5, [0.5], 0, 8.0) < 0
        rng = np.random.default_rng(3)
        for _ in range(1000):
            k = int(rng.integers(1, 10))
            d_neg = rng.uniform(0, 2, size=k)
            j = int(rng.integers(0, k))
            if abs(d_neg[j] - 1.0) <= 1e-9:
                continue
            g = grad_wrt_negative_distance(
                float(rng.uniform(0, 2)), d_neg, j, float(rng.uniform(0.5, 16))
            )
            assert np.sign(g) == np.sign(d_neg[j] - 1.0)

    def test_matches_finite_difference(self):
        rng = np.random.default_rng(4)
        h = 1e-6
        for _ in range(50):
            d_pos = float(rng.uniform(0.05, 1.95))
            d_neg = rng.uniform(0.05, 1.95, size=3)
            s = float(rng.uniform(1, 8))
            fd = (
                nhd_loss_from_distances(d_pos + h, d_neg, s)
                - nhd_loss_from_distances(d_pos - h, d_neg, s)
            ) / (2 * h)
            assert grad_wrt_positive_distance(d_pos, d_neg, s) == pytest.approx(
                fd, rel=1e-6, abs=1e-9
            )


class TestPseudoLabelLoss:
    def test_single_cluster_is_zero(self):
        rng = np.random.default_rng(5)
        v = rng.normal(size=4)
        out = pseudo_label_loss(v, 0, rng.normal(size=(1, 4)), 8.0, 8.0)
        assert out.value == 0.0
        np.testing.assert_array_equal(out.grad_v, np.zeros(4))
        np.testing.assert_array_equal(out.grad_bank, np.zeros((1, 4)))

    def test_two_cluster_hand_value(self):
        v, rows = two_row_memory(S1_HALF)
        out = pseudo_label_loss(v, 0, rows, s=8.0, s1=S1_HALF)
        assert out.value == pytest.approx(np.log1p(np.exp(-8.0)), rel=1e-9)

    def test_gradcheck(self):
        result = check_pseudo_label_loss(seed=12, n_instances=50)
        assert result.passed, f"max rel err {result.max_rel_err}"


class TestDotProductLoss:
    def test_single_row_is_zero(self):
        out = dot_product_loss(np.array([1.0, -2.0]), 0, np.array([[0.5, 0.3]]), 8.0)
        assert out.value == 0.0

    def test_saturated_antipodal_rows(self):
        l = 4
        v = np.full(l, 10.0)
        rows = np.vstack([v, -v, -v])
        out = dot_product_loss(v, 0, rows, s=8.0)
        margin = 8.0 * l * np.tanh(10.0) ** 2
        expected = np.log1p(2 * np.exp(-2 * margin))  # scalar oracle
        assert out.value == pytest.approx(expected, abs=1e-15)

    def test_matches_naive_softmax(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            n = int(rng.integers(2, 8))
            l = int(rng.integers(2, 6))
            v = rng.normal(size=l)
            rows = rng.normal(size=(n, l))
            i = int(rng.integers(0, n))
            s = float(rng.uniform(0.5, 4))
            logits = s * np.tanh(rows) @ np.tanh(v)
            naive = -np.log(np.exp(logits[i]) / np.exp(logits).sum())
            assert dot_product_loss(v, i, rows, s).value == pytest.approx(naive, rel=1e-10)


class TestAttentionLoss:
    def test_zero_at_prototype(self):
        t = np.tile(np.array([[2.0], [3.0]]), (1, 4))
        out = attention_loss(t, np.array([2.0, 3.0]))
        assert out.value == 0.0

    def test_balanced_positions_cancel_gradient(self):
        out = attention_loss(np.array([[0.0, 2.0]]), np.array([1.0]))
        assert out.value == pytest.approx(2.0)
        np.testing.assert_array_equal(out.grad_w_att, [0.0])

    def test_sign_zero_convention(self):
        out = attention_loss(np.array([[1.0, 1.0]]), np.array([1.0]))
        np.testing.assert_array_equal(out.grad_w_att, [0.0])
        np.testing.assert_array_equal(out.grad_t, np.zeros((1, 2)))


class TestTotalLoss:
    def _parts(self, seed=7):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=5)
        bank = rng.normal(size=(6, 5))
        cluster = rng.normal(size=(3, 5))
        t = rng.normal(size=(2, 4))
        w_att = rng.normal(size=2)
        return (
            nhd_loss(v, 1, bank, 4.0, 2.0),
            pseudo_label_loss(v, 0, cluster, 4.0, 2.0),
            attention_loss(t, w_att),
        )

    def test_zero_weights_reduce_to_nhd(self):
        nhd, pseudo, att = self._parts()
        combined = total_loss(nhd, pseudo, att, 0.0, 0.0)
        assert combined.value == nhd.value
        np.testing.assert_array_equal(combined.grad_v, nhd.grad_v)
        assert combined.grad_cluster is None and combined.grad_w_att is None

    def test_linearity_of_value(self):
        nhd, pseudo, att = self._parts()
        combined = total_loss(nhd, pseudo, att, 0.5, 2.0)
        assert combined.value == pytest.approx(
            nhd.value + 0.5 * pseudo.value + 2.0 * att.value, rel=1e-12
        )

    def test_linearity_of_gradients(self):
        nhd, pseudo, att = self._parts()
        combined = total_loss(nhd, pseudo, att, 1.0, 1.0)
        np.testing.assert_allclose(combined.grad_v, nhd.grad_v + pseudo.grad_v, rtol=1e-12)
        np.testing.assert_allclose(combined.grad_cluster, pseudo.grad_bank, rtol=1e-12)
        np.testing.assert_allclose(combined.grad_w_att, att.grad_w_att, rtol=1e-12)

    def test_negative_weight_rejected(self):
        nhd, pseudo, att = self._parts()
        with pytest.raises(ValueError):
            total_loss(nhd, pseudo, att, -0.1, 1.0)


class TestLogitShiftStability:
    def test_value_matches_shifted_naive(self):
        # shifting every logit by a constant must leave the value unchanged;
        # the stabilized form is compared against naive evaluations shifted
        # by hand where the exponentials stay finite
        rng = np.random.default_rng(8)
        for _ in range(100):
            k = int(rng.integers(1, 6))
            d_pos = float(rng.uniform(0, 2))
            d_neg = rng.uniform(0, 2, size=k)
            s = float(rng.uniform(0.5, 6))
            z_pos = s * (2 - d_pos) ** 2 / 4
            z_neg = s * (1 - d_neg) ** 2
            value = nhd_loss_from_distances(d_pos, d_neg, s)
            for shift in (-50.0, 0.0, 50.0):
                num = np.exp(z_pos + shift)
                den = num + np.exp(z_neg + shift).sum()
                assert value == pytest.approx(-np.log(num / den), rel=1e-10)
