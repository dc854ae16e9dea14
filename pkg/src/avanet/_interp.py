"""Compiled inner loop of bilinear sampling (nodata-free rasters only).

Evaluates the same clamped bilinear expression as the numpy path in
`avanet.raster`, term for term, so both produce bit-identical values.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def bilinear_grid(values, xs, ys, x_origin, y_origin, cell_size):
    nrows, ncols = values.shape
    out = np.empty(xs.shape, dtype=np.float64)
    flat_x = xs.ravel()
    flat_y = ys.ravel()
    flat_out = out.ravel()
    for i in range(flat_x.size):
        col = (flat_x[i] - x_origin) / cell_size - 0.5
        row = nrows - 0.5 - (flat_y[i] - y_origin) / cell_size
        if col < 0.0:
            col = 0.0
        elif col > ncols - 1.0:
            col = ncols - 1.0
        if row < 0.0:
            row = 0.0
        elif row > nrows - 1.0:
            row = nrows - 1.0
        c0 = int(np.floor(col))
        r0 = int(np.floor(row))
        if c0 > ncols - 2:
            c0 = ncols - 2
        if r0 > nrows - 2:
            r0 = nrows - 2
        fc = col - c0
        fr = row - r0
        flat_out[i] = (1.0 - fr) * (
            (1.0 - fc) * values[r0, c0] + fc * values[r0, c0 + 1]
        ) + fr * ((1.0 - fc) * values[r0 + 1, c0] + fc * values[r0 + 1, c0 + 1])
    return out


def warmup() -> None:
    v = np.arange(9, dtype=np.float64).reshape(3, 3)
    bilinear_grid(v, np.array([1.0]), np.array([1.0]), 0.0, 0.0, 1.0)
