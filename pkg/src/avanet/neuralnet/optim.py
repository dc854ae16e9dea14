"""Gradient-descent optimizers and the learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import GradientSet, ParameterSet


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "adam"
    base_lr: float = 1e-3
    decay_rate: float = 0.5
    decay_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer method {self.method!r}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 < self.decay_rate <= 1.0:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be a positive integer")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def lr_schedule(step: int, cfg: OptimizerConfig) -> float:
    """Exponentially decaying rate: base_lr * decay_rate ** (step / decay_steps)."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return cfg.base_lr * cfg.decay_rate ** (step / cfg.decay_steps)


def sgd_step(params: ParameterSet, grads: GradientSet, lr: float) -> ParameterSet:
    """Plain gradient descent: theta <- theta - lr * grad (in place)."""
    for name, tensor in params:
        tensor.data = tensor.data - tensor.data.dtype.type(lr) * grads[name].astype(
            tensor.data.dtype, copy=False
        )
    return params


class AdamState:
    """First and second moment estimates, one pair per parameter."""

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray]):
        self.m = m
        self.v = v

    @classmethod
    def init(cls, params: ParameterSet) -> "AdamState":
        return cls(
            m={name: np.zeros_like(t.data) for name, t in params},
            v={name: np.zeros_like(t.data) for name, t in params},
        )


def adam_step(params: ParameterSet, grads: GradientSet, state: AdamState,
              t: int, lr: float, cfg: OptimizerConfig = OptimizerConfig()) -> ParameterSet:
    """One Adam update with bias-corrected moments (in place).

    ``t`` is the 1-based step count used for bias correction.
    """
    if t < 1:
        raise ValueError(f"Adam step count must be >= 1, got {t}")
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.eps
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, tensor in params:
        dt = tensor.data.dtype
        g = grads[name].astype(dt, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= dt.type(b1)
        m += dt.type(1.0 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1.0 - b2) * g * g
        m_hat = m / dt.type(bc1)
        v_hat = v / dt.type(bc2)
        tensor.data = tensor.data - dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(eps))
    return params
