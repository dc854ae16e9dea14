"""Optimizer steps and the learning-rate schedule."""

import numpy as np
import pytest

from avanet.neuralnet.layers import GradientSet, ParameterSet
from avanet.neuralnet.optim import (
    AdamState,
    OptimizerConfig,
    adam_step,
    lr_schedule,
    sgd_step,
)
from avanet.neuralnet.tensor import Tensor


def make_params(**arrays):
    params = ParameterSet()
    for name, arr in arrays.items():
        params.register(name, Tensor(np.asarray(arr, dtype=np.float64)))
    return params


def make_grads(params, **arrays):
    return GradientSet(params, {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})


class TestLrSchedule:
    def test_step_zero_is_base(self):
        cfg = OptimizerConfig(base_lr=0.01)
        assert lr_schedule(0, cfg) == 0.01

    def test_halves_at_decay_steps(self):
        cfg = OptimizerConfig(base_lr=0.01, decay_rate=0.5, decay_steps=100)
        assert lr_schedule(100, cfg) == pytest.approx(0.005, rel=1e-12)

    def test_continuous_exponent(self):
        # direct evaluation: 0.5 ** 2.5
        cfg = OptimizerConfig(base_lr=1.0, decay_rate=0.5, decay_steps=1000)
        assert lr_schedule(2500, cfg) == pytest.approx(0.5**2.5, rel=1e-12)
        assert lr_schedule(2500, cfg) == pytest.approx(0.17677669, abs=1e-8)

    def test_negative_step_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, OptimizerConfig())


class TestSgd:
    def test_zero_gradient_no_change(self):
        params = make_params(w=[1.0, -2.0])
        sgd_step(params, make_grads(params, w=[0.0, 0.0]), lr=0.5)
        assert params["w"].data.tolist() == [1.0, -2.0]

    def test_single_step_formula(self):
        params = make_params(w=[0.0])
        sgd_step(params, make_grads(params, w=[2.0]), lr=0.1)
        assert params["w"].data[0] == pytest.approx(-0.2, rel=1e-15)

    def test_quadratic_descent_matches_hand_iteration(self):
        # oracle: iterate theta <- theta - lr * 2 theta by hand
        theta = 1.0
        for _ in range(10):
            theta = theta - 0.1 * 2.0 * theta
        assert theta == pytest.approx(0.8**10)

        params = make_params(w=[1.0])
        for _ in range(10):
            g = 2.0 * params["w"].data
            sgd_step(params, make_grads(params, w=g), lr=0.1)
        assert params["w"].data[0] == pytest.approx(theta, rel=1e-12)
        assert params["w"].data[0] == pytest.approx(0.10737418, abs=1e-8)


def reference_adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Independently coded Adam loop (bias-corrected moments)."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        out.append(theta)
    return out


class TestAdam:
    def test_zero_gradient_fresh_state_no_change(self):
        params = make_params(w=[3.0])
        state = AdamState.init(params)
        adam_step(params, make_grads(params, w=[0.0]), state, t=1, lr=0.1)
        assert params["w"].data[0] == 3.0

    def test_first_step_magnitude_near_lr(self):
        # analytic: m_hat = g, v_hat = g^2, so |delta| = lr * |g| / (|g| + eps)
        for g in (1e-3, -0.5, 2.0, -1e3):
            params = make_params(w=[0.0])
            state = AdamState.init(params)
            adam_step(params, make_grads(params, w=[g]), state, t=1, lr=1e-3)
            delta = params["w"].data[0]
            assert abs(abs(delta) - 1e-3) < 1e-6
            assert np.sign(delta) == -np.sign(g)

    def test_step_zero_rejected(self):
        params = make_params(w=[0.0])
        state = AdamState.init(params)
        with pytest.raises(ValueError, match=">= 1"):
            adam_step(params, make_grads(params, w=[1.0]), state, t=0, lr=0.1)

    def test_three_steps_quadratic_matches_reference(self):
        lr = 0.05
        thetas = []
        theta = 1.0
        grads_seen = []
        params = make_params(w=[1.0])
        state = AdamState.init(params)
        for t in range(1, 4):
            g = 2.0 * params["w"].data[0]
            grads_seen.append(g)
            adam_step(params, make_grads(params, w=[g]), state, t=t, lr=lr)
            thetas.append(params["w"].data[0])
        expected = reference_adam(1.0, grads_seen, lr)
        np.testing.assert_allclose(thetas, expected, rtol=1e-12)

    def test_state_shapes_follow_params(self):
        params = make_params(w=np.zeros((2, 3)), b=np.zeros(3))
        state = AdamState.init(params)
        assert state.m["w"].shape == (2, 3)
        assert state.v["b"].shape == (3,)


class TestOptimizerConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(method="rmsprop"),
            dict(base_lr=0.0),
            dict(decay_rate=0.0),
            dict(decay_rate=1.5),
            dict(decay_steps=0),
            dict(beta1=1.0),
            dict(eps=0.0),
        ],
    )
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            OptimizerConfig(**kwargs)
