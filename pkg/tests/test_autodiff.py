"""Tensor ops against brute-force oracles, and gradient checks per layer."""

import math

import numpy as np
import pytest

from avanet.neuralnet import ops
from avanet.neuralnet.layers import (
    ConvLayer,
    DenseLayer,
    ParameterSet,
    backward,
    conv_forward,
    dense_forward,
)
from avanet.neuralnet.tensor import FINITE_CHECKS, Tensor, grad

# ---------------------------------------------------------------------------
# brute-force oracles


def dense_oracle(weights, biases, x, activation):
    """Per-neuron summation: y_j = f(sum_i w_ji x_i + b_j)."""
    out = np.zeros(weights.shape[0])
    for j in range(weights.shape[0]):
        acc = biases[j]
        for i in range(weights.shape[1]):
            acc += weights[j, i] * x[i]
        out[j] = acc
    if activation == "relu":
        return np.maximum(out, 0.0)
    if activation == "sigmoid":
        return 1.0 / (1.0 + np.exp(-out))
    return out


def conv_oracle(x, filters, biases):
    """Direct quadruple-loop cross-correlation (valid region, no activation)."""
    c, h, w = x.shape
    nf, _, kh, kw = filters.shape
    ho, wo = h - kh + 1, w - kw + 1
    y = np.zeros((nf, ho, wo))
    for f in range(nf):
        for i in range(ho):
            for j in range(wo):
                acc = biases[f]
                for ch in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += filters[f, ch, di, dj] * x[ch, i + di, j + dj]
                y[f, i, j] = acc
    return y


def maxpool_oracle(x):
    h2, w2 = x.shape[0] // 2, x.shape[1] // 2
    y = np.zeros((h2, w2))
    for i in range(h2):
        for j in range(w2):
            y[i, j] = max(
                x[2 * i, 2 * j], x[2 * i, 2 * j + 1],
                x[2 * i + 1, 2 * j], x[2 * i + 1, 2 * j + 1],
            )
    return y


def finite_difference(loss_fn, arr, h=1e-6):
    """Central differences of a scalar function w.r.t. every entry of arr."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        lp = loss_fn()
        arr[idx] = old - h
        lm = loss_fn()
        arr[idx] = old
        g[idx] = (lp - lm) / (2.0 * h)
    return g


def assert_close_grad(analytic, numeric, rtol=1e-3, floor=1e-5):
    scale = np.maximum(np.abs(numeric), floor)
    np.testing.assert_array_less(np.abs(analytic - numeric) / scale, rtol)


# ---------------------------------------------------------------------------
# dense


class TestDense:
    def test_identity_weights(self):
        layer = DenseLayer(Tensor(np.eye(4)), Tensor(np.zeros(4)), "identity")
        x = np.array([1.0, -2.0, 3.0, 0.5])
        assert np.array_equal(dense_forward(x, layer).data, x)

    def test_zero_weights_bias_through_relu(self):
        layer = DenseLayer(Tensor(np.zeros((2, 3))), Tensor(np.array([1.0, 2.0])), "relu")
        for x in (np.zeros(3), np.array([5.0, -7.0, 0.1])):
            assert dense_forward(x, layer).data.tolist() == [1.0, 2.0]

    @pytest.mark.parametrize("activation", ["relu", "sigmoid", "identity"])
    def test_matches_per_neuron_oracle(self, activation):
        rng = np.random.default_rng(5)
        for _ in range(100):
            w = rng.standard_normal((3, 5))
            b = rng.standard_normal(3)
            x = rng.standard_normal(5)
            layer = DenseLayer(Tensor(w), Tensor(b), activation)
            expected = dense_oracle(w, b, x, activation)
            np.testing.assert_allclose(dense_forward(x, layer).data, expected, rtol=1e-9)

    def test_shape_mismatch(self):
        layer = DenseLayer(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)), "relu")
        with pytest.raises(ValueError, match="shape"):
            dense_forward(np.zeros(4), layer)

    def test_batch_input(self):
        rng = np.random.default_rng(6)
        w, b = rng.standard_normal((4, 3)), rng.standard_normal(4)
        layer = DenseLayer(Tensor(w), Tensor(b), "identity")
        xs = rng.standard_normal((7, 3))
        out = dense_forward(xs, layer).data
        for i in range(7):
            np.testing.assert_allclose(out[i], dense_oracle(w, b, xs[i], "identity"))


# ---------------------------------------------------------------------------
# conv


class TestConv:
    def test_one_by_one_filter_is_relu(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 5, 4))
        layer = ConvLayer(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(conv_forward(x, layer).data, np.maximum(x, 0.0))

    def test_ones_filter_constant_input(self):
        c = 0.7
        x = np.full((1, 6, 6), c)
        layer = ConvLayer(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        np.testing.assert_allclose(conv_forward(x, layer).data, 9 * c, rtol=1e-12)

    def test_matches_quadruple_loop_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            x = rng.standard_normal((1, 7, 6))
            f = rng.standard_normal((2, 1, 3, 3))
            b = rng.standard_normal(2)
            got = ops.conv2d(Tensor(x), Tensor(f), Tensor(b)).data
            expected = conv_oracle(x, f, b)
            np.testing.assert_allclose(got, expected, rtol=1e-9, atol=1e-12)

    def test_multichannel_matches_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((3, 8, 5))
        f = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        got = ops.conv2d(Tensor(x), Tensor(f), Tensor(b)).data
        np.testing.assert_allclose(got, conv_oracle(x, f, b), rtol=1e-9, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channel"):
            ops.conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))),
                       Tensor(np.zeros(1)))

    def test_input_smaller_than_filter(self):
        with pytest.raises(ValueError, match="smaller"):
            ops.conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))),
                       Tensor(np.zeros(1)))

    def test_even_filter_rejected_by_layer(self):
        with pytest.raises(ValueError, match="odd"):
            ConvLayer(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))


# ---------------------------------------------------------------------------
# pooling


class TestMaxPool:
    def test_constant_input(self):
        x = np.full((1, 1, 6, 8), 3.5)
        out = ops.maxpool2(Tensor(x)).data
        assert out.shape == (1, 1, 3, 4)
        np.testing.assert_array_equal(out, 3.5)

    def test_single_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert ops.maxpool2(Tensor(x)).data.tolist() == [[4.0]]

    def test_odd_trailing_edges_dropped_vs_oracle(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            x = rng.standard_normal((5, 7))
            got = ops.maxpool2(Tensor(x)).data
            assert got.shape == (2, 3)
            np.testing.assert_array_equal(got, maxpool_oracle(x))

    def test_tie_routes_gradient_to_single_winner(self):
        x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
        y = ops.maxpool2(x)
        g = grad(ops.total(y), x)
        assert g.sum() == 1.0
        assert (g != 0).sum() == 1
        assert g[0, 0, 0, 0] == 1.0  # first maximum in row-major order


# ---------------------------------------------------------------------------
# dropout


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.arange(12.0))
        for mode in ("train", "eval"):
            out = ops.dropout(x, 0.0, mode, np.random.default_rng(0))
            assert np.array_equal(out.data, x.data)

    def test_eval_mode_identity(self):
        x = Tensor(np.arange(12.0))
        out = ops.dropout(x, 0.9, "eval")
        assert out is x

    def test_bad_rate(self):
        with pytest.raises(ValueError, match="rate"):
            ops.dropout(Tensor(np.zeros(3)), 1.0, "train", np.random.default_rng(0))

    def test_sample_mean_preserved(self):
        # inverted dropout keeps the expectation: mean of 1e6 ones ~ 1.0
        rng = np.random.default_rng(11)
        x = Tensor(np.ones(1_000_000))
        out = ops.dropout(x, 0.5, "train", rng)
        assert abs(out.data.mean() - 1.0) < 0.01

    def test_backward_replays_forward_mask(self):
        x = Tensor(np.ones(1000), requires_grad=True)
        out = ops.dropout(x, 0.5, "train", np.random.default_rng(12))
        g = grad(ops.total(out), x)
        dropped = out.data == 0.0
        assert np.array_equal(g == 0.0, dropped)
        np.testing.assert_array_equal(g[~dropped], 2.0)


# ---------------------------------------------------------------------------
# softmax / cross entropy


class TestSoftmax:
    def test_uniform_logits(self):
        p = ops.softmax(Tensor(np.zeros(3))).data
        np.testing.assert_allclose(p, 1.0 / 3.0, rtol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(13)
        z = rng.standard_normal(3)
        a = ops.softmax(Tensor(z)).data
        b = ops.softmax(Tensor(z + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_against_direct_evaluation_oracle(self):
        # oracle: unstabilized definition exp(z) / sum(exp(z))
        rng = np.random.default_rng(14)
        for _ in range(100):
            z = rng.uniform(-30, 30, size=3)
            e = np.exp(z)
            expected = e / e.sum()
            np.testing.assert_allclose(ops.softmax(Tensor(z)).data, expected, rtol=1e-12)
        np.testing.assert_allclose(
            ops.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data,
            [0.09003057, 0.24472847, 0.66524096],
            atol=1e-8,
        )

    def test_positive_and_normalized_for_large_logits(self):
        rng = np.random.default_rng(15)
        z = rng.uniform(-50, 50, size=(200, 3))
        p = ops.softmax(Tensor(z)).data
        assert (p > 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        t = np.array([0.0, 1.0, 0.0])
        loss = ops.cross_entropy(Tensor(t.copy()), t)
        assert float(loss.data) == 0.0

    def test_uniform_prediction(self):
        p = np.full(3, 1.0 / 3.0)
        for cls in range(3):
            t = np.eye(3)[cls]
            loss = ops.cross_entropy(Tensor(p), t)
            assert float(loss.data) == pytest.approx(math.log(3.0), rel=1e-12)

    def test_direct_evaluation_oracle(self):
        loss = ops.cross_entropy(Tensor(np.array([0.1, 0.2, 0.7])), np.eye(3)[2])
        assert float(loss.data) == pytest.approx(-math.log(0.7), rel=1e-12)
        assert float(loss.data) == pytest.approx(0.356675, abs=1e-6)

    def test_nonnegative_and_zero_only_at_target(self):
        rng = np.random.default_rng(16)
        for _ in range(100):
            z = rng.standard_normal(3)
            p = ops.softmax(Tensor(z))
            t = np.eye(3)[rng.integers(0, 3)]
            assert float(ops.cross_entropy(p, t).data) > 0.0

    def test_clamp_keeps_loss_finite(self):
        loss = ops.cross_entropy(Tensor(np.array([1.0, 0.0, 0.0])), np.eye(3)[1])
        assert math.isfinite(float(loss.data))
        assert float(loss.data) == pytest.approx(-math.log(1e-12))

    def test_rejects_non_one_hot(self):
        with pytest.raises(ValueError, match="one-hot"):
            ops.cross_entropy(Tensor(np.full(3, 1 / 3)), np.array([0.5, 0.5, 0.0]))

    def test_batched_shape(self):
        p = np.full((4, 3), 1.0 / 3.0)
        t = np.eye(3)[[0, 1, 2, 0]]
        loss = ops.cross_entropy(Tensor(p), t)
        assert loss.shape == (4,)


# ---------------------------------------------------------------------------
# reverse mode


class TestBackward:
    def test_gradient_of_parameter_itself(self):
        theta = Tensor(np.array(5.0), requires_grad=True)
        assert grad(theta, theta) == 1.0

    def test_gradient_of_square(self):
        theta = Tensor(np.array(3.0), requires_grad=True)
        loss = ops.mul(theta, theta)
        assert float(grad(loss, theta)) == pytest.approx(6.0, rel=1e-12)

    def test_detached_tensor_raises(self):
        theta = Tensor(np.array(3.0), requires_grad=True)
        other = Tensor(np.array(1.0), requires_grad=True)
        loss = ops.mul(theta, theta)
        with pytest.raises(ValueError, match="detached"):
            grad(loss, other)

    def test_non_scalar_loss_rejected(self):
        theta = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            grad(ops.mul(theta, theta), theta)

    def test_fan_out_accumulates(self):
        theta = Tensor(np.array(2.0), requires_grad=True)
        loss = ops.add(ops.mul(theta, theta), theta)  # theta^2 + theta
        assert float(grad(loss, theta)) == pytest.approx(5.0, rel=1e-12)

    def test_parameter_set_backward(self):
        params = ParameterSet()
        a = params.register("a", Tensor(np.array([2.0])))
        b = params.register("b", Tensor(np.array([3.0])))
        loss = ops.total(ops.mul(a, b))
        grads = backward(loss, params)
        assert grads["a"] == pytest.approx([3.0])
        assert grads["b"] == pytest.approx([2.0])


class TestGradientChecks:
    """Central finite differences vs the recorded backward pass, per layer."""

    def check(self, build_loss, *arrays):
        loss = build_loss()
        analytic = grad(loss, *arrays)
        if len(arrays) == 1:
            analytic = (analytic,)
        for tensor, a in zip(arrays, analytic):
            numeric = finite_difference(lambda: float(build_loss().data), tensor.data, h=1e-6)
            assert_close_grad(a, numeric)

    def test_dense_layers(self):
        rng = np.random.default_rng(20)
        for activation in ("relu", "sigmoid", "identity"):
            w = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
            b = Tensor(rng.standard_normal(4), requires_grad=True)
            x = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
            layer = DenseLayer(w, b, activation)
            self.check(lambda: ops.total(ops.mul(dense_forward(x, layer),
                                                 dense_forward(x, layer))), w, b, x)

    def test_conv_layer(self):
        rng = np.random.default_rng(21)
        x = Tensor(rng.standard_normal((2, 3, 6, 5)), requires_grad=True)
        f = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.standard_normal(4), requires_grad=True)

        def build():
            y = ops.relu(ops.conv2d(x, f, b))
            return ops.total(ops.mul(y, y))

        self.check(build, f, b, x)

    def test_maxpool(self):
        rng = np.random.default_rng(22)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)

        def build():
            y = ops.maxpool2(x)
            return ops.total(ops.mul(y, y))

        self.check(build, x)

    def test_dropout_with_replayed_mask(self):
        x = Tensor(np.random.default_rng(23).standard_normal(40), requires_grad=True)

        def build():
            out = ops.dropout(x, 0.3, "train", np.random.default_rng(99))
            return ops.total(ops.mul(out, out))

        self.check(build, x)

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(24)
        z = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        t = np.eye(3)[rng.integers(0, 3, size=5)]

        def build():
            return ops.total(ops.cross_entropy(ops.softmax(z), t))

        self.check(build, z)

    def test_mean_and_concat_and_crop(self):
        rng = np.random.default_rng(25)
        a = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((2, 1, 4, 4)), requires_grad=True)

        def build():
            merged = ops.concat(a, b, axis=1)
            cropped = ops.crop_center(merged, 2, 2)
            return ops.mean(ops.mul(cropped, cropped))

        self.check(build, a, b)


def test_finite_check_hook():
    import avanet.neuralnet.tensor as tensor_mod

    tensor_mod.FINITE_CHECKS = True
    try:
        with pytest.raises(FloatingPointError):
            Tensor(np.array([1.0, np.nan]))
        Tensor(np.array([1.0, 2.0]))
    finally:
        tensor_mod.FINITE_CHECKS = False
