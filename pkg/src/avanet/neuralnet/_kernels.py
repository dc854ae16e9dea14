"""Compiled gather/scatter kernels behind the convolution and pooling ops.

These are plain hand-written loops, JIT-compiled with numba (single
threaded, no fastmath) so they behave exactly like their numpy equivalents
while avoiding large strided intermediates. The matrix products themselves
stay in BLAS; only the patch gathering, gradient scattering and pooling
run here.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(x, kh, kw):
    """Patch matrix of a (N, C, H, W) array: (N*Ho*Wo, C*kh*kw), row-major taps."""
    n, c, h, w = x.shape
    ho = h - kh + 1
    wo = w - kw + 1
    cols = np.empty((n * ho * wo, c * kh * kw), dtype=x.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                col = 0
                for ch in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            cols[row, col] = x[b, ch, i + di, j + dj]
                            col += 1
    return cols


@njit(cache=True)
def col2im_add(dcols, n, c, h, w, kh, kw):
    """Adjoint of `im2col`: scatter-add patch gradients back onto the input."""
    ho = h - kh + 1
    wo = w - kw + 1
    dx = np.zeros((n, c, h, w), dtype=dcols.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                col = 0
                for ch in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            dx[b, ch, i + di, j + dj] += dcols[row, col]
                            col += 1
    return dx


@njit(cache=True)
def nhwc_to_nchw(y, n, ho, wo, f):
    """Reshape a (N*Ho*Wo, F) matrix into a contiguous (N, F, Ho, Wo) array."""
    out = np.empty((n, f, ho, wo), dtype=y.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                for ch in range(f):
                    out[b, ch, i, j] = y[row, ch]
    return out


@njit(cache=True)
def nchw_to_mat(g):
    """Flatten a (N, F, Ho, Wo) array into (N*Ho*Wo, F), matching `nhwc_to_nchw`."""
    n, f, ho, wo = g.shape
    out = np.empty((n * ho * wo, f), dtype=g.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                for ch in range(f):
                    out[row, ch] = g[b, ch, i, j]
    return out


@njit(cache=True)
def maxpool2_forward(x):
    """2x2 max pooling on (N, C, H, W); returns the pooled array and the
    window-local index (0..3, row-major) of the first maximum."""
    n, c, h, w = x.shape
    h2 = h // 2
    w2 = w // 2
    y = np.empty((n, c, h2, w2), dtype=x.dtype)
    idx = np.empty((n, c, h2, w2), dtype=np.uint8)
    for b in range(n):
        for ch in range(c):
            for i in range(h2):
                for j in range(w2):
                    v0 = x[b, ch, 2 * i, 2 * j]
                    v1 = x[b, ch, 2 * i, 2 * j + 1]
                    v2 = x[b, ch, 2 * i + 1, 2 * j]
                    v3 = x[b, ch, 2 * i + 1, 2 * j + 1]
                    best = v0
                    k = 0
                    if v1 > best:
                        best = v1
                        k = 1
                    if v2 > best:
                        best = v2
                        k = 2
                    if v3 > best:
                        best = v3
                        k = 3
                    y[b, ch, i, j] = best
                    idx[b, ch, i, j] = k
    return y, idx


@njit(cache=True)
def maxpool2_backward(idx, g, h, w):
    """Route pooled gradients back to the winning input positions."""
    n, c, h2, w2 = g.shape
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(h2):
                for j in range(w2):
                    k = idx[b, ch, i, j]
                    di = k // 2
                    dj = k % 2
                    dx[b, ch, 2 * i + di, 2 * j + dj] = g[b, ch, i, j]
    return dx


def warmup() -> None:
    """Trigger JIT compilation of all kernels on tiny inputs."""
    x = np.arange(2 * 3 * 4 * 5, dtype=np.float32).reshape(2, 3, 4, 5)
    for arr in (x, x.astype(np.float64)):
        cols = im2col(arr, 3, 3)
        col2im_add(cols, 2, 3, 4, 5, 3, 3)
        y = np.ascontiguousarray(cols[:, :4])
        nhwc_to_nchw(y, 2, 2, 3, 4)
        nchw_to_mat(arr)
        pooled, idx = maxpool2_forward(arr)
        maxpool2_backward(idx, pooled, 4, 5)
