"""Oriented terrain/snow patches radiating from a query point.

A fixed number of rectangular viewports (16 by default) tile the full circle
of look directions around a point. Each viewport is sampled on a regular
grid whose rows run radially outward (row 0 nearest the point) and whose
columns run tangentially. The snow map is sampled on the same layout at a
coarser resolution.

Rotation handling is exact by construction: a rotation offset is decomposed
into a whole number of viewport steps plus a fractional remainder, and the
remainder is quantized to 2**-20 of the angular step (~0.4 microradian,
i.e. sub-millimeter at the far end of a viewport). Offsets that differ by a
multiple of the step therefore produce bit-identical sample grids, shifted
cyclically — the discrete form of the pipeline's rotation invariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raster import Raster, bilinear_sample_masked

#: Terrain patches store (elevation - elevation at the query point) / this.
ELEVATION_SCALE = 1000.0
#: Snow patches store snow depth / this.
SNOW_SCALE = 5.0

#: Fractional rotation offsets are quantized to step / 2**20.
_ANGLE_QUANTUM_BITS = 20


@dataclass(frozen=True)
class ViewportGeometry:
    """Physical layout of the viewport ring.

    Defaults give 16 viewports of 3360 m x 2080 m at 40 m/pixel (84 x 52
    samples) with snow sampled 8x coarser (10 x 6 samples).
    """

    n_viewports: int = 16
    radial_length: float = 3360.0
    tangential_width: float = 2080.0
    resolution: float = 40.0
    snow_downscale: int = 8

    def __post_init__(self):
        if self.n_viewports < 1:
            raise ValueError("n_viewports must be positive")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.snow_downscale < 1:
            raise ValueError("snow_downscale must be a positive integer")
        for name in ("radial_length", "tangential_width"):
            extent = getattr(self, name)
            n = extent / self.resolution
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError(f"{name} must be a positive multiple of resolution")
        if self.radial_pixels < self.snow_downscale or self.tangential_pixels < self.snow_downscale:
            raise ValueError("snow_downscale larger than the patch")

    @property
    def radial_pixels(self) -> int:
        return round(self.radial_length / self.resolution)

    @property
    def tangential_pixels(self) -> int:
        return round(self.tangential_width / self.resolution)

    @property
    def snow_radial_pixels(self) -> int:
        return self.radial_pixels // self.snow_downscale

    @property
    def snow_tangential_pixels(self) -> int:
        return self.tangential_pixels // self.snow_downscale

    @property
    def angular_step(self) -> float:
        return 2.0 * math.pi / self.n_viewports


@dataclass(eq=False)
class ViewportStack:
    """All viewports around one query point, ready for the network.

    ``terrain`` has shape (n_viewports, radial, tangential) and holds
    center-relative, scaled elevation; ``snow`` holds scaled snow depth on
    the coarse layout. ``sampled_nodata`` is True if any sample touched a
    nodata cell (such stacks are skipped during training).
    """

    terrain: np.ndarray
    snow: np.ndarray
    center: tuple[float, float]
    rotation_offset: float
    flipped: bool
    sampled_nodata: bool

    @property
    def n_viewports(self) -> int:
        return self.terrain.shape[0]


def _decompose_rotation(geometry: ViewportGeometry, rotation_offset: float):
    """Split an offset into (whole steps, quantized fractional remainder)."""
    step = geometry.angular_step
    whole = round(rotation_offset / step)
    frac = rotation_offset - whole * step
    quantum = step / (1 << _ANGLE_QUANTUM_BITS)
    frac = round(frac / quantum) * quantum
    return whole, frac


def look_angle(geometry: ViewportGeometry, index: int, rotation_offset: float = 0.0) -> float:
    """Look direction of one viewport, radians clockwise from north."""
    whole, frac = _decompose_rotation(geometry, rotation_offset)
    canonical = (index + whole) % geometry.n_viewports
    return frac + canonical * geometry.angular_step


def _axis_offsets(geometry: ViewportGeometry, snow: bool):
    """Local (radial, tangential) offsets of every sample, meters."""
    if snow:
        n_r = geometry.snow_radial_pixels
        n_t = geometry.snow_tangential_pixels
        res = geometry.resolution * geometry.snow_downscale
    else:
        n_r = geometry.radial_pixels
        n_t = geometry.tangential_pixels
        res = geometry.resolution
    radial = (np.arange(n_r) + 0.5) * res
    tangential = (np.arange(n_t) - (n_t - 1) / 2.0) * res
    return radial, tangential


def _sample_coords(geometry, center, index, rotation_offset, flipped, snow):
    angle = look_angle(geometry, index, rotation_offset)
    ux, uy = math.sin(angle), math.cos(angle)  # outward look direction
    vx, vy = math.cos(angle), -math.sin(angle)  # tangential, to the right
    if flipped:
        vx, vy = -vx, -vy
    radial, tangential = _axis_offsets(geometry, snow)
    cx, cy = center
    xs = cx + radial[:, None] * ux + tangential[None, :] * vx
    ys = cy + radial[:, None] * uy + tangential[None, :] * vy
    return xs, ys


def viewport_sample_coords(
    geometry: ViewportGeometry,
    center: tuple[float, float],
    index: int,
    rotation_offset: float = 0.0,
    flipped: bool = False,
):
    """World coordinates of every sample of one terrain viewport.

    Returns ``(xs, ys)`` arrays of shape (radial_pixels, tangential_pixels).
    Sample (r, t) lies at ``center + (r + 0.5) * res * u + (t - (T-1)/2) *
    res * v`` where u is the look direction of viewport ``index`` and v its
    perpendicular; ``flipped`` mirrors the tangential axis.
    """
    if not 0 <= index < geometry.n_viewports:
        raise ValueError(f"viewport index {index} out of range")
    return _sample_coords(geometry, center, index, rotation_offset, flipped, snow=False)


def extract_viewports(
    terrain: Raster,
    snow: Raster,
    center: tuple[float, float],
    geometry: ViewportGeometry = ViewportGeometry(),
    rotation_offset: float = 0.0,
    flipped: bool = False,
) -> ViewportStack:
    """Sample the full viewport ring around ``center``.

    Terrain values are taken bilinearly, centered on the elevation at the
    query point and scaled by `ELEVATION_SCALE`; snow values are scaled by
    `SNOW_SCALE`. Samples beyond the raster edge clamp to the border (no
    flag); samples touching nodata cells set ``sampled_nodata``.

    Raises
    ------
    ValueError
        If ``center`` lies outside the terrain raster.
    """
    cx, cy = center
    if not terrain.contains(cx, cy):
        raise ValueError(f"center {center} outside terrain bounds")

    n = geometry.n_viewports
    z_center, center_flag = bilinear_sample_masked(terrain, cx, cy)

    def sample_all(raster, snow_layout, scale, shift):
        xs = []
        ys = []
        for i in range(n):
            x, y = _sample_coords(geometry, center, i, rotation_offset, flipped, snow_layout)
            xs.append(x)
            ys.append(y)
        values, flags = bilinear_sample_masked(raster, np.stack(xs), np.stack(ys))
        return (values - shift) / scale, bool(flags.any())

    terrain_patches, terrain_flag = sample_all(terrain, False, ELEVATION_SCALE, z_center)
    snow_patches, snow_flag = sample_all(snow, True, SNOW_SCALE, 0.0)

    return ViewportStack(
        terrain=terrain_patches,
        snow=snow_patches,
        center=(float(cx), float(cy)),
        rotation_offset=float(rotation_offset),
        flipped=bool(flipped),
        sampled_nodata=bool(center_flag or terrain_flag or snow_flag),
    )


def shift_stack(stack: ViewportStack, k: int) -> ViewportStack:
    """Stack whose viewport i holds the original viewport (i + k) mod n.

    This is the permutation induced by rotating the extraction by k angular
    steps: ``extract(offset + k * step)`` equals ``shift_stack(extract(offset), k)``.
    """
    n = stack.n_viewports
    idx = (np.arange(n) + k) % n
    return ViewportStack(
        terrain=stack.terrain[idx],
        snow=stack.snow[idx],
        center=stack.center,
        rotation_offset=stack.rotation_offset,
        flipped=stack.flipped,
        sampled_nodata=stack.sampled_nodata,
    )
