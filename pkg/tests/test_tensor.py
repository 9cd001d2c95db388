"""Autodiff core: op semantics, backward rules, graph lifecycle."""

import math

import numpy as np
import pytest

import oracles
from vesseg import tensor as T
from vesseg.errors import ConfigError, ShapeError, StateError


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestTensorBasics:
    def test_default_dtype_is_float32(self):
        t = T.Tensor([[1, 2], [3, 4]])
        assert t.dtype == np.float32

    def test_float64_input_stays_float64(self):
        t = T.Tensor(np.zeros(3, dtype=np.float64))
        assert t.dtype == np.float64

    def test_shape_matches_buffer(self, rng):
        t = T.Tensor(rng.standard_normal((2, 3, 4)))
        assert t.shape == (2, 3, 4)
        assert t.data.size == 2 * 3 * 4

    def test_sum_gradient_is_ones(self, rng):
        x = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        T.backward(T.tsum(x))
        assert np.array_equal(x.grad, np.ones((3, 4), dtype=np.float32))

    def test_sum_of_squares_gradient(self, rng):
        data = rng.standard_normal((4, 5)).astype(np.float64)
        x = T.Tensor(data, requires_grad=True)
        T.backward(T.tsum(T.mul(x, x)))
        assert np.allclose(x.grad, 2.0 * data, atol=1e-12)

    def test_backward_rejects_non_scalar(self, rng):
        x = T.Tensor(rng.standard_normal((2, 2)), requires_grad=True)
        y = T.mul(x, 3.0)
        with pytest.raises(ShapeError):
            T.backward(y)

    def test_backward_twice_raises(self, rng):
        x = T.Tensor(rng.standard_normal(5), requires_grad=True)
        loss = T.tsum(x)
        T.backward(loss)
        with pytest.raises(StateError):
            T.backward(loss)

    def test_fresh_forward_allows_backward_again(self, rng):
        x = T.Tensor(rng.standard_normal(5), requires_grad=True)
        T.backward(T.tsum(x))
        T.backward(T.tsum(x))  # new graph, no error
        assert np.array_equal(x.grad, 2.0 * np.ones(5, dtype=np.float32))

    def test_no_grad_blocks_recording(self, rng):
        x = T.Tensor(rng.standard_normal(5), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert y._backward is None and not y.requires_grad

    def test_backward_returns_gradient_map(self, rng):
        x = T.Tensor(rng.standard_normal(5), requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        grads = T.backward(loss)
        assert x in grads
        assert np.array_equal(grads[x], x.grad)

    def test_shared_subexpression_accumulates(self):
        x = T.Tensor(np.array([2.0]), requires_grad=True)
        y = T.mul(x, x)  # d/dx = 2x = 4
        loss = T.tsum(T.add(y, y))  # doubles it
        T.backward(loss)
        assert np.allclose(x.grad, [8.0])

    def test_zero_grad_clears(self, rng):
        x = T.Tensor(rng.standard_normal(3), requires_grad=True)
        T.backward(T.tsum(x))
        T.zero_grad([x])
        assert x.grad is None


class TestConv2d:
    def test_one_by_one_identity_kernel(self, rng):
        x = T.Tensor(rng.standard_normal((1, 1, 5, 5)))
        w = T.Tensor(np.ones((1, 1, 1, 1)))
        b = T.Tensor(np.zeros(1))
        y = T.conv2d(x, w, b)
        assert np.array_equal(y.data, x.data)

    @pytest.mark.parametrize("shape,kernel,stride,pad", [
        ((1, 1, 5, 5), 3, 1, 1),
        ((2, 3, 6, 6), 3, 1, 0),
        ((2, 2, 7, 7), 3, 2, 0),
        ((1, 2, 5, 5), 1, 1, 0),
        ((1, 1, 9, 9), 5, 2, 2),
    ])
    def test_matches_loop_reference(self, rng, shape, kernel, stride, pad):
        cout = 3
        x = rng.standard_normal(shape)
        w = rng.standard_normal((cout, shape[1], kernel, kernel))
        b = rng.standard_normal(cout)
        y = T.conv2d(T.Tensor(x, dtype=np.float64),
                     T.Tensor(w, dtype=np.float64),
                     T.Tensor(b, dtype=np.float64), stride=stride, pad=pad)
        ref = oracles.conv2d_loops(x, w, b, stride=stride, pad=pad)
        assert y.data.shape == ref.shape
        assert np.allclose(y.data, ref, atol=1e-12)

    def test_output_size_must_divide(self, rng):
        x = T.Tensor(rng.standard_normal((1, 1, 6, 6)))
        w = T.Tensor(rng.standard_normal((1, 1, 3, 3)))
        b = T.Tensor(np.zeros(1))
        with pytest.raises(ConfigError):
            T.conv2d(x, w, b, stride=2, pad=0)

    def test_channel_mismatch_rejected(self, rng):
        x = T.Tensor(rng.standard_normal((1, 2, 5, 5)))
        w = T.Tensor(rng.standard_normal((1, 3, 3, 3)))
        with pytest.raises(ShapeError):
            T.conv2d(x, w, T.Tensor(np.zeros(1)), pad=1)

    def test_even_kernel_rejected(self, rng):
        x = T.Tensor(rng.standard_normal((1, 1, 4, 4)))
        w = T.Tensor(rng.standard_normal((1, 1, 2, 2)))
        with pytest.raises(ConfigError):
            T.conv2d(x, w, T.Tensor(np.zeros(1)))

    def test_bias_broadcasts_per_channel(self, rng):
        x = T.Tensor(np.zeros((1, 1, 4, 4)))
        w = T.Tensor(np.zeros((2, 1, 3, 3)))
        b = T.Tensor(np.array([1.5, -2.0]))
        y = T.conv2d(x, w, b, pad=1)
        assert np.allclose(y.data[0, 0], 1.5)
        assert np.allclose(y.data[0, 1], -2.0)


class TestBatchNorm:
    def test_train_output_is_standardized(self, rng):
        x = T.Tensor(rng.standard_normal((4, 3, 6, 6)) * 5 + 2,
                     dtype=np.float64)
        gamma = T.Tensor(np.ones(3), dtype=np.float64)
        beta = T.Tensor(np.zeros(3), dtype=np.float64)
        y = T.batchnorm2d(x, gamma, beta, T.BatchNormState(), "train")
        mean = y.data.mean(axis=(0, 2, 3))
        var = y.data.var(axis=(0, 2, 3))
        assert np.allclose(mean, 0.0, atol=1e-10)
        assert np.allclose(var, 1.0, atol=1e-4)  # eps shifts it slightly

    def test_running_stats_first_copy_then_ema(self):
        state = T.BatchNormState()
        gamma = T.Tensor(np.ones(1), dtype=np.float64)
        beta = T.Tensor(np.zeros(1), dtype=np.float64)
        a = np.arange(8, dtype=np.float64).reshape(2, 1, 2, 2)
        T.batchnorm2d(T.Tensor(a, dtype=np.float64), gamma, beta, state,
                      "train")
        assert np.allclose(state.mean, a.mean())
        assert np.allclose(state.var, a.var())
        b = a + 10.0
        T.batchnorm2d(T.Tensor(b, dtype=np.float64), gamma, beta, state,
                      "train")
        expect_mean = 0.99 * a.mean() + 0.01 * b.mean()
        expect_var = 0.99 * a.var() + 0.01 * b.var()
        assert np.allclose(state.mean, expect_mean)
        assert np.allclose(state.var, expect_var)

    def test_infer_before_train_raises(self, rng):
        x = T.Tensor(rng.standard_normal((1, 2, 4, 4)))
        gamma = T.Tensor(np.ones(2))
        beta = T.Tensor(np.zeros(2))
        with pytest.raises(StateError):
            T.batchnorm2d(x, gamma, beta, T.BatchNormState(), "infer")

    def test_infer_uses_running_stats(self, rng):
        state = T.BatchNormState()
        gamma = T.Tensor(np.array([2.0]), dtype=np.float64)
        beta = T.Tensor(np.array([0.5]), dtype=np.float64)
        a = rng.standard_normal((3, 1, 4, 4))
        T.batchnorm2d(T.Tensor(a, dtype=np.float64), gamma, beta, state,
                      "train")
        b = rng.standard_normal((2, 1, 4, 4))
        y = T.batchnorm2d(T.Tensor(b, dtype=np.float64), gamma, beta, state,
                          "infer")
        expect = 2.0 * (b - a.mean()) / np.sqrt(a.var() + 1e-5) + 0.5
        assert np.allclose(y.data, expect, atol=1e-12)

    def test_unknown_mode_rejected(self, rng):
        x = T.Tensor(rng.standard_normal((1, 1, 2, 2)))
        one = T.Tensor(np.ones(1))
        with pytest.raises(ConfigError):
            T.batchnorm2d(x, one, one, T.BatchNormState(), "test")


class TestPooling:
    def test_maxpool_hand_values(self):
        x = T.Tensor(np.array([[[[1, 2, 5, 6],
                                 [3, 4, 7, 8],
                                 [9, 1, 2, 0],
                                 [5, 6, 1, 3]]]], dtype=np.float32))
        y = T.maxpool2d(x)
        assert np.array_equal(y.data, [[[[4, 8], [9, 3]]]])

    def test_tie_routes_gradient_to_first_position(self):
        x = T.Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
        T.backward(T.tsum(T.maxpool2d(x)))
        assert np.array_equal(x.grad, [[[[1, 0], [0, 0]]]])

    def test_gradient_reaches_argmax_only(self, rng):
        data = rng.permutation(16).reshape(1, 1, 4, 4).astype(np.float32)
        x = T.Tensor(data, requires_grad=True)
        T.backward(T.tsum(T.maxpool2d(x)))
        assert x.grad.sum() == 4  # one unit per window
        assert np.all((x.grad > 0) == (data == np.repeat(
            np.repeat(T.maxpool2d(T.Tensor(data)).data, 2, 2), 2, 3)))

    def test_indivisible_input_rejected(self, rng):
        x = T.Tensor(rng.standard_normal((1, 1, 5, 4)))
        with pytest.raises(ShapeError):
            T.maxpool2d(x)

    def test_overlapping_pool_rejected(self, rng):
        x = T.Tensor(rng.standard_normal((1, 1, 4, 4)))
        with pytest.raises(ConfigError):
            T.maxpool2d(x, k=3, stride=1)

    def test_pool_inverts_upsample(self, rng):
        x = T.Tensor(rng.standard_normal((2, 3, 4, 4)))
        y = T.maxpool2d(T.upsample2d(x, 2))
        assert np.array_equal(y.data, x.data)


class TestUpsampleConcat:
    def test_upsample_repeats_blocks(self):
        x = T.Tensor(np.array([[[[1, 2], [3, 4]]]], dtype=np.float32))
        y = T.upsample2d(x, 2)
        assert np.array_equal(y.data, [[[[1, 1, 2, 2],
                                         [1, 1, 2, 2],
                                         [3, 3, 4, 4],
                                         [3, 3, 4, 4]]]])

    def test_upsample_backward_sums_blocks(self):
        x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        T.backward(T.tsum(T.upsample2d(x, 3)))
        assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 9.0))

    def test_concat_keeps_order(self, rng):
        a = T.Tensor(rng.standard_normal((1, 2, 3, 3)))
        b = T.Tensor(rng.standard_normal((1, 3, 3, 3)))
        y = T.concat_channels(a, b)
        assert y.data.shape == (1, 5, 3, 3)
        assert np.array_equal(y.data[:, :2], a.data)
        assert np.array_equal(y.data[:, 2:], b.data)

    def test_concat_backward_splits(self, rng):
        a = T.Tensor(rng.standard_normal((1, 2, 2, 2)), requires_grad=True)
        b = T.Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True)
        y = T.concat_channels(a, b)
        T.backward(T.tsum(T.mul(y, y)))
        assert np.allclose(a.grad, 2 * a.data, atol=1e-6)
        assert np.allclose(b.grad, 2 * b.data, atol=1e-6)

    def test_concat_spatial_mismatch_rejected(self, rng):
        a = T.Tensor(rng.standard_normal((1, 2, 3, 3)))
        b = T.Tensor(rng.standard_normal((1, 2, 4, 4)))
        with pytest.raises(ShapeError):
            T.concat_channels(a, b)


class TestPointwise:
    def test_relu_values_and_grad(self):
        x = T.Tensor(np.array([-2.0, -0.5, 0.0, 0.5, 2.0]),
                     requires_grad=True)
        y = T.relu(x)
        assert np.array_equal(y.data, [0, 0, 0, 0.5, 2.0])
        T.backward(T.tsum(y))
        assert np.array_equal(x.grad, [0, 0, 0, 1, 1])

    def test_sigmoid_midpoint(self):
        x = T.Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
        y = T.sigmoid(x)
        assert y.data[0] == 0.5
        T.backward(T.tsum(y))
        assert abs(x.grad[0] - 0.25) < 1e-12

    def test_sigmoid_extremes_stay_finite(self):
        x = T.Tensor(np.array([-500.0, 500.0]), dtype=np.float64)
        y = T.sigmoid(x)
        assert np.all(np.isfinite(y.data))
        assert y.data[0] >= 0.0 and y.data[1] <= 1.0

    def test_bce_hand_value(self):
        pred = T.Tensor(np.array([0.9, 0.2]), dtype=np.float64)
        loss = T.bce_loss(pred, np.array([1.0, 0.0]))
        expect = -(math.log(0.9) + math.log(1.0 - 0.2)) / 2.0
        assert abs(float(loss.data) - expect) < 1e-12

    def test_bce_clamps_exact_zero_and_one(self):
        pred = T.Tensor(np.array([0.0, 1.0]), requires_grad=True,
                        dtype=np.float64)
        loss = T.bce_loss(pred, np.array([1.0, 0.0]))
        assert np.isfinite(float(loss.data))
        T.backward(loss)
        assert np.array_equal(pred.grad, [0.0, 0.0])  # clamp blocks gradient

    def test_bce_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            T.bce_loss(T.Tensor(np.zeros(3)), np.zeros(4))

    def test_bce_perfect_prediction_is_small(self):
        pred = T.Tensor(np.array([1.0, 0.0]), dtype=np.float64)
        loss = T.bce_loss(pred, np.array([1.0, 0.0]))
        assert float(loss.data) < 1e-6


class TestDeterminism:
    def test_same_op_twice_bit_identical(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        y1 = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), pad=1)
        y2 = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), pad=1)
        assert y1.data.tobytes() == y2.data.tobytes()
