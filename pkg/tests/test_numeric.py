import math
import statistics

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from roaddefect.errors import NumericDomainError, ShapeError
from roaddefect.numeric import (as_tensor, check_gradient, check_gradients, instance_normalize,
                                layer_normalize, smooth_l1, softmax)


def t(x):
    return as_tensor(x)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax(t([0.0, 0.0, 0.0]), 0).numpy(), [1 / 3] * 3, atol=1e-15)

    def test_single_element(self):
        assert softmax(t([7.3]), 0).item() == 1.0

    def test_against_high_precision_oracle(self):
        # 40-digit direct exp/sum evaluation
        expected = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
        np.testing.assert_allclose(softmax(t([1.0, 2.0, 3.0]), 0).numpy(), expected, rtol=1e-14)

    def test_large_logits_stable(self):
        out = softmax(t([1000.0, 1000.0]), 0)
        np.testing.assert_allclose(out.numpy(), [0.5, 0.5])

    def test_non_finite_rejected(self):
        with pytest.raises(NumericDomainError):
            softmax(t([0.0, float("nan")]))

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            softmax(t([[1.0, 2.0]]), axis=2)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=6),
           st.integers(1, 4))
    def test_slices_sum_to_one(self, row, reps):
        x = t([row] * reps)
        for axis in (0, 1):
            s = softmax(x, axis).sum(axis)
            np.testing.assert_allclose(s.numpy(), 1.0, atol=1e-6)


class TestInstanceNormalize:
    def test_constant_is_zero(self):
        np.testing.assert_array_equal(instance_normalize(t([5.0] * 4)).numpy(), 0.0)

    def test_already_standard(self):
        np.testing.assert_allclose(instance_normalize(t([1.0, -1.0])).numpy(), [1, -1], atol=1e-5)

    def test_direct_oracle(self):
        x = [1.0, 2.0, 3.0, 4.0]
        mean = statistics.fmean(x)
        var = statistics.pvariance(x)
        expected = [(v - mean) / math.sqrt(var + 1e-5) for v in x]
        np.testing.assert_allclose(instance_normalize(t(x)).numpy(), expected, rtol=1e-14)

    def test_single_element_identity(self):
        assert instance_normalize(t([3.5])).item() == 3.5

    def test_partial_dims(self):
        x = torch.randn(3, 4, 5, dtype=torch.float64)
        y = instance_normalize(x, dims=(-2, -1))
        np.testing.assert_allclose(y.mean(dim=(-2, -1)).numpy(), 0, atol=1e-12)


class TestLayerNormalize:
    def test_constant_input(self):
        out = layer_normalize(t([[2.0, 2.0, 2.0]]), t([1.0] * 3), t([0.0] * 3))
        np.testing.assert_array_equal(out.numpy(), 0.0)

    def test_zero_gain_gives_bias(self):
        bias = t([0.3, -1.0, 2.0])
        out = layer_normalize(t([[1.0, 5.0, -2.0]]), t([0.0] * 3), bias)
        np.testing.assert_array_equal(out.numpy(), bias.numpy()[None])

    def test_direct_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=4)
        g = rng.normal(size=4)
        b = rng.normal(size=4)
        m = sum(x) / 4
        v = sum((xi - m) ** 2 for xi in x) / 4
        expected = [(xi - m) / math.sqrt(v + 1e-5) * gi + bi for xi, gi, bi in zip(x, g, b)]
        np.testing.assert_allclose(layer_normalize(t(x), t(g), t(b)).numpy(), expected, rtol=1e-13)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            layer_normalize(t([[1.0, 2.0]]), t([1.0] * 3), t([0.0] * 3))


class TestSmoothL1:
    @pytest.mark.parametrize("x, expected", [(0.0, 0.0), (0.5, 0.125), (2.0, 1.5), (-2.0, 1.5)])
    def test_values(self, x, expected):
        assert smooth_l1(t(x)).item() == expected

    def test_continuous_and_c1_at_one(self):
        h = 1e-9
        lo, hi = smooth_l1(t(1 - h)).item(), smooth_l1(t(1 + h)).item()
        assert abs(lo - hi) < 1e-8
        assert check_gradient(lambda v: smooth_l1(v).sum(), [1.0 - 1e-3, 1.0 + 1e-3]) < 1e-6


class TestCheckGradient:
    def test_square(self):
        assert check_gradient(lambda v: (v * v).sum(), [3.0]) < 1e-6

    def test_softmax_sum_has_zero_gradient(self):
        x = torch.randn(5, dtype=torch.float64)
        xa = x.clone().requires_grad_(True)
        softmax(xa, 0).sum().backward()
        np.testing.assert_allclose(xa.grad.numpy(), 0.0, atol=1e-12)
        assert check_gradient(lambda v: softmax(v, 0).sum(), x) < 1e-8

    def test_non_finite_function(self):
        with pytest.raises(NumericDomainError):
            check_gradient(lambda v: torch.log(v).sum(), [-1.0])


SHAPES = [(3,), (2, 3), (4, 2), (1, 5), (3, 3), (2, 2, 2), (5,), (2, 4), (6,), (3, 2, 2)]


@pytest.mark.parametrize("seed", range(10))
class TestGradientSuite:
    def _x(self, seed):
        g = torch.Generator().manual_seed(seed)
        return torch.randn(SHAPES[seed], generator=g, dtype=torch.float64)

    def test_matmul(self, seed):
        x = self._x(seed)
        w = torch.randn(x.shape[-1], 3, dtype=torch.float64, generator=torch.Generator().manual_seed(99))
        assert check_gradient(lambda v: torch.sin(v @ w).sum(), x) < 1e-4

    def test_softmax(self, seed):
        x = self._x(seed)
        c = torch.randn(x.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(7))
        assert check_gradient(lambda v: (softmax(v, -1) * c).sum(), x) < 1e-4

    def test_instance_normalize(self, seed):
        x = self._x(seed)
        c = torch.randn(x.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(8))
        assert check_gradient(lambda v: (instance_normalize(v) * c).sum(), x) < 1e-4

    def test_layer_normalize(self, seed):
        x = self._x(seed)
        d = x.shape[-1]
        g = torch.linspace(0.5, 1.5, d, dtype=torch.float64)
        b = torch.linspace(-0.2, 0.2, d, dtype=torch.float64)
        c = torch.randn(x.shape, dtype=torch.float64, generator=torch.Generator().manual_seed(9))
        assert check_gradient(lambda v: (layer_normalize(v, g, b) * c).sum(), x) < 1e-4

    def test_smooth_l1(self, seed):
        x = self._x(seed) * 2
        assert check_gradient(lambda v: smooth_l1(v).sum(), x) < 1e-4

    def test_convolution(self, seed):
        gen = torch.Generator().manual_seed(seed)
        x = torch.randn(1, 2, 5, 5, generator=gen, dtype=torch.float64)
        w = torch.randn(3, 2, 3, 3, generator=gen, dtype=torch.float64)
        assert check_gradient(lambda v: torch.tanh(F.conv2d(x, v, padding=1)).sum(), w) < 1e-4
        assert check_gradient(lambda v: torch.tanh(F.conv2d(v, w, stride=2)).sum(), x) < 1e-4


def test_check_gradients_closure():
    w = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    b = torch.randn(2, dtype=torch.float64, requires_grad=True)
    x = torch.randn(4, 3, dtype=torch.float64)
    assert check_gradients(lambda: torch.tanh(x @ w + b).pow(2).sum(), [w, b]) < 1e-6


def test_ops_bit_deterministic():
    x = torch.randn(4, 7, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    for f in (lambda v: softmax(v, -1), instance_normalize, smooth_l1):
        assert torch.equal(f(x), f(x.clone()))
