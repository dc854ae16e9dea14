"""Differentiable array operations.

Each function takes and returns `Tensor` objects, computing the forward
value eagerly with numpy and recording one vector-Jacobian callback per
input. Convolutions run as im2col matrix products so the heavy lifting
stays inside BLAS; their backward pass rebuilds the patch matrix from the
saved input instead of keeping it alive between passes.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import Tensor, as_tensor

#: Probabilities below this are clamped before taking the log.
LOG_CLAMP = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that were broadcast in the forward op."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(
            (a, lambda g: _unbroadcast(g, a.data.shape)),
            (b, lambda g: _unbroadcast(g, b.data.shape)),
        ),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ),
    )


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    mask = x.data > 0
    return Tensor(out, parents=((x, lambda g: g * mask),))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x.data))
    s = s.astype(x.data.dtype, copy=False)
    return Tensor(s, parents=((x, lambda g: g * s * (1.0 - s)),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    old = x.data.shape
    return Tensor(x.data.reshape(shape), parents=((x, lambda g: g.reshape(old)),))


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na = a.data.shape[axis]

    def vjp_a(g):
        return np.take(g, np.arange(na), axis=axis)

    def vjp_b(g):
        return np.take(g, np.arange(na, g.shape[axis]), axis=axis)

    return Tensor(
        np.concatenate([a.data, b.data], axis=axis),
        parents=((a, vjp_a), (b, vjp_b)),
    )


def crop_center(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Centered spatial crop of a (..., H, W) tensor."""
    x = as_tensor(x)
    h, w = x.data.shape[-2:]
    if out_h > h or out_w > w:
        raise ValueError(f"cannot crop ({h}, {w}) to larger ({out_h}, {out_w})")
    r0 = (h - out_h) // 2
    c0 = (w - out_w) // 2

    def vjp(g):
        full = np.zeros(x.data.shape, dtype=g.dtype)
        full[..., r0 : r0 + out_h, c0 : c0 + out_w] = g
        return full

    return Tensor(x.data[..., r0 : r0 + out_h, c0 : c0 + out_w], parents=((x, vjp),))


def mean(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size

    def vjp(g):
        return np.broadcast_to(g / n, x.data.shape).astype(x.data.dtype, copy=False)

    return Tensor(np.mean(x.data), parents=((x, vjp),))


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    x = as_tensor(x)

    def vjp(g):
        return np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False)

    return Tensor(np.sum(x.data), parents=((x, vjp),))


def mean_axis(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    n = x.data.shape[axis]

    def vjp(g):
        return np.repeat(np.expand_dims(g / n, axis), n, axis=axis).astype(
            x.data.dtype, copy=False
        )

    return Tensor(x.data.mean(axis=axis), parents=((x, vjp),))


def affine(x: Tensor, weights: Tensor, biases: Tensor) -> Tensor:
    """y = x @ W.T + b for x of shape (N, in), W (out, in), b (out,)."""
    x, weights, biases = as_tensor(x), as_tensor(weights), as_tensor(biases)
    if x.data.ndim != 2 or x.data.shape[1] != weights.data.shape[1]:
        raise ValueError(
            f"affine shape mismatch: x {x.data.shape} vs W {weights.data.shape}"
        )
    out = x.data @ weights.data.T + biases.data
    return Tensor(
        out,
        parents=(
            (x, lambda g: g @ weights.data),
            (weights, lambda g: g.T @ x.data),
            (biases, lambda g: g.sum(axis=0)),
        ),
    )


def _promote4d(data: np.ndarray):
    """View 2-D/3-D spatial data as (N, C, H, W); return (array, original rank)."""
    rank = data.ndim
    if rank == 2:
        return data[None, None], rank
    if rank == 3:
        return data[None], rank
    if rank == 4:
        return data, rank
    raise ValueError(f"expected 2-4 dimensions, got shape {data.shape}")


def _restore_rank(data: np.ndarray, rank: int) -> np.ndarray:
    if rank == 2:
        return data[0, 0]
    if rank == 3:
        return data[0]
    return data


def conv2d(x: Tensor, filters: Tensor, biases: Tensor) -> Tensor:
    """Valid-region cross-correlation over all input channels, plus bias.

    ``x`` is (N, C, H, W) (lower ranks are promoted), ``filters`` is
    (F, C, K, L), ``biases`` (F,). Output is (N, F, H-K+1, W-L+1).

    Runs as an im2col matrix product; the patch matrix is kept alive for
    the backward pass, where the filter gradient is one matrix product
    against it and the input gradient is one matrix product scattered back
    through the im2col adjoint.
    """
    x, filters, biases = as_tensor(x), as_tensor(filters), as_tensor(biases)
    xd, rank = _promote4d(x.data)
    f = filters.data
    n, c, h, w = xd.shape
    nf, cf, kh, kw = f.shape
    if c != cf:
        raise ValueError(f"conv2d channel mismatch: input {c}, filters {cf}")
    if h < kh or w < kw:
        raise ValueError(f"conv2d input ({h}, {w}) smaller than filter ({kh}, {kw})")
    ho, wo = h - kh + 1, w - kw + 1

    cols = _kernels.im2col(np.ascontiguousarray(xd), kh, kw)  # (N*Ho*Wo, C*K*L)
    wmat = f.reshape(nf, c * kh * kw)
    out = cols @ wmat.T + biases.data
    y = _kernels.nhwc_to_nchw(np.ascontiguousarray(out), n, ho, wo, nf)

    def grad_mat(g):
        return _kernels.nchw_to_mat(np.ascontiguousarray(_promote4d(g)[0]))

    def vjp_x(g):
        dcols = grad_mat(g) @ wmat
        return _restore_rank(_kernels.col2im_add(dcols, n, c, h, w, kh, kw), rank)

    def vjp_w(g):
        return (grad_mat(g).T @ cols).reshape(nf, c, kh, kw)

    def vjp_b(g):
        g4 = _promote4d(g)[0]
        return g4.sum(axis=(0, 2, 3))

    return Tensor(
        _restore_rank(y, rank),
        parents=((x, vjp_x), (filters, vjp_w), (biases, vjp_b)),
    )


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; a trailing odd row/column is dropped.

    Ties inside a window route the gradient to the first maximum in
    row-major window order, so pooling stays deterministic.
    """
    x = as_tensor(x)
    xd, rank = _promote4d(x.data)
    n, c, h, w = xd.shape
    if h < 2 or w < 2:
        raise ValueError(f"maxpool2 needs spatial dims >= 2, got ({h}, {w})")
    h2, w2 = h // 2, w // 2
    cropped = np.ascontiguousarray(xd[:, :, : 2 * h2, : 2 * w2])
    y, idx = _kernels.maxpool2_forward(cropped)

    def vjp(g):
        g4 = np.ascontiguousarray(_promote4d(g)[0])
        dx = _kernels.maxpool2_backward(idx, g4, h, w)
        return _restore_rank(dx, rank)

    return Tensor(_restore_rank(y, rank), parents=((x, vjp),))


def dropout(x: Tensor, rate: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero entries with probability ``rate`` in train mode.

    Survivors are scaled by 1/(1-rate) so the expected value is unchanged;
    eval mode is the identity. The mask is captured by the recorded graph,
    so the backward pass replays exactly the forward mask.
    """
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = rng.random(x.data.shape) >= rate
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    factor = keep * scale
    return Tensor(x.data * factor, parents=((x, lambda g: g * factor),))


def softmax(logits: Tensor) -> Tensor:
    """Probabilities along the last axis, computed with max-subtraction."""
    logits = as_tensor(logits)
    z = logits.data
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return p * (g - inner)

    return Tensor(p, parents=((logits, vjp),))


def cross_entropy(probs: Tensor, target) -> Tensor:
    """Per-sample cross entropy -sum(target * log(probs)) over the last axis.

    ``target`` is a constant one-hot array matching ``probs``; probabilities
    are clamped at `LOG_CLAMP` before the log. A (C,) input yields a scalar,
    an (N, C) input a length-N vector.
    """
    probs = as_tensor(probs)
    t = np.asarray(target, dtype=probs.data.dtype)
    if t.shape != probs.data.shape:
        raise ValueError(f"target shape {t.shape} != probs shape {probs.data.shape}")
    onehot_ok = np.all((t == 0) | (t == 1)) and np.allclose(t.sum(axis=-1), 1.0)
    if not onehot_ok:
        raise ValueError("target must be one-hot")
    clamped = np.maximum(probs.data, LOG_CLAMP)
    loss = -(t * np.log(clamped)).sum(axis=-1)

    def vjp(g):
        # d/dp of -t*log(max(p, eps)): zero where the clamp is active
        active = probs.data >= LOG_CLAMP
        return np.expand_dims(g, -1) * np.where(active, -t / clamped, 0.0)

    return Tensor(loss, parents=((probs, vjp),))
