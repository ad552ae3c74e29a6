import numpy as np
import pytest

from maqd.tensor import Shape, elementwise_map, reduce_mean, zeros


class TestZeros:
    def test_single_element(self):
        t = zeros(Shape(1, 1, 1, 1))
        assert t.shape == (1, 1, 1, 1)
        assert t[0, 0, 0, 0] == 0.0

    def test_count_is_product(self):
        t = zeros(Shape(2, 3, 4, 4))
        assert t.size == 96
        assert np.all(t == 0.0)

    def test_zero_extent_rejected(self):
        with pytest.raises(ValueError):
            zeros(Shape(2, 0, 4, 4))

    def test_oversized_rejected(self):
        with pytest.raises(ValueError):
            zeros(Shape(2**30, 2**30, 1, 1))


class TestElementwiseMap:
    def test_identity_is_bitwise_copy(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=(2, 2, 3, 3))
        out = elementwise_map(t, lambda v: v)
        assert np.array_equal(out, t)
        assert out is not t

    def test_doubling(self):
        t = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3)
        assert np.array_equal(elementwise_map(t, lambda v: 2 * v).ravel(), [2, 4, 6])

    def test_negation_involution(self):
        rng = np.random.default_rng(1)
        t = rng.normal(size=(2, 1, 2, 2))
        back = elementwise_map(elementwise_map(t, lambda v: -v), lambda v: -v)
        assert np.array_equal(back, t)

    def test_shape_preserved(self):
        t = np.ones((3, 2, 4, 5))
        assert elementwise_map(t, np.square).shape == t.shape


class TestReduceMean:
    def test_all_axes(self):
        t = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 1, 4)
        out = reduce_mean(t, "nchw")
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 2.5

    def test_no_axes_is_identity(self):
        rng = np.random.default_rng(2)
        t = rng.normal(size=(2, 3, 2, 2))
        assert np.array_equal(reduce_mean(t, ()), t)

    def test_two_point_mean_over_batch(self):
        t = np.array([3.0, 7.0]).reshape(2, 1, 1, 1)
        assert reduce_mean(t, "n").item() == 5.0

    def test_matches_compensated_sum(self):
        rng = np.random.default_rng(3)
        t = rng.normal(size=(4, 8, 8, 8))
        got = reduce_mean(t, "nchw").item()
        expected = float(np.sum(t, dtype=np.longdouble) / t.size)
        assert got == pytest.approx(expected, abs=1e-14)

    def test_unknown_axis_rejected(self):
        with pytest.raises(ValueError):
            reduce_mean(np.ones((1, 1, 1, 1)), "q")
