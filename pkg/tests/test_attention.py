"""Attention pooling primitives: hand-evaluated examples and softmax
invariants."""

import numpy as np
import pytest

from crhash.attention import attended_pool, attention_map, fuse, rarity


class TestRarity:
    def test_zero_at_prototype(self):
        t = np.tile(np.array([[1.0], [2.0]]), (1, 5))
        np.testing.assert_array_equal(rarity(t, np.array([1.0, 2.0])), np.zeros(5))

    def test_hand_value(self):
        t = np.array([[1.0], [-1.0]])
        assert rarity(t, np.zeros(2))[0] == 2.0

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=(3, 7))
        w = rng.normal(size=3)
        perm = rng.permutation(7)
        np.testing.assert_allclose(rarity(t[:, perm], w), rarity(t, w)[perm], rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            rarity(np.zeros((3, 2)), np.zeros(4))


class TestAttentionMap:
    def test_uniform_for_equal_scores(self):
        alpha = attention_map(np.full(6, 3.25))
        np.testing.assert_allclose(alpha, 1 / 6, rtol=1e-15)

    def test_hand_softmax(self):
        alpha = attention_map(np.array([0.0, np.log(2.0)]))
        np.testing.assert_allclose(alpha, [1 / 3, 2 / 3], rtol=1e-12)

    def test_sums_to_one_and_positive(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            alpha = attention_map(rng.normal(size=int(rng.integers(1, 30))) * 50)
            assert alpha.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(alpha > 0) and np.all(alpha <= 1)

    def test_order_preserving(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            r = rng.normal(size=10)
            assert np.argmax(attention_map(r)) == np.argmax(r)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        r = rng.normal(size=8)
        for shift in (-1000.0, -3.5, 0.0, 7.0, 1000.0):
            np.testing.assert_allclose(
                attention_map(r + shift), attention_map(r), atol=1e-12
            )

    def test_stable_for_huge_scores(self):
        alpha = attention_map(np.array([1e6, 1e6 - 1]))
        assert np.isfinite(alpha).all()


class TestAttendedPool:
    def test_uniform_is_mean(self):
        rng = np.random.default_rng(4)
        t = rng.normal(size=(5, 9))
        np.testing.assert_allclose(
            attended_pool(t, np.full(9, 1 / 9)), t.mean(axis=1), rtol=1e-12
        )

    def test_one_hot_selects_position(self):
        rng = np.random.default_rng(5)
        t = rng.normal(size=(4, 6))
        alpha = np.zeros(6)
        alpha[2] = 1.0
        np.testing.assert_array_equal(attended_pool(t, alpha), t[:, 2])

    def test_hand_value(self):
        t = np.array([[0.0, 4.0]])
        assert attended_pool(t, np.array([0.25, 0.75]))[0] == pytest.approx(3.0)

    def test_output_in_componentwise_hull(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            t = rng.normal(size=(3, 8))
            alpha = attention_map(rng.normal(size=8))
            pooled = attended_pool(t, alpha)
            assert np.all(pooled >= t.min(axis=1) - 1e-12)
            assert np.all(pooled <= t.max(axis=1) + 1e-12)


class TestFuse:
    def test_concatenation(self):
        np.testing.assert_array_equal(
            fuse(np.array([1.0, 2.0]), np.array([3.0, 4.0])), [1.0, 2.0, 3.0, 4.0]
        )

    def test_identical_halves(self):
        x = np.arange(5.0)
        fused = fuse(x, x)
        np.testing.assert_array_equal(fused[:5], fused[5:])

    def test_length_doubles(self):
        rng = np.random.default_rng(7)
        for c in (1, 3, 17, 64):
            assert fuse(rng.normal(size=c), rng.normal(size=c)).shape == (2 * c,)

    def test_mismatch_rejected(self):
        with pytest.raises(ValueError):
            fuse(np.zeros(3), np.zeros(4))
