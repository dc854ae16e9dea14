"""Georeferenced scalar grids: ASCII-grid I/O, sampling, shading, rendering.

A :class:`Raster` is a row-major grid of scalars with square cells. Row 0 is
the northernmost row and y increases northward, matching the ESRI ASCII grid
convention. Cell (col, row) has its center at::

    x = x_origin + (col + 0.5) * cell_size
    y = y_origin + (nrows - row - 0.5) * cell_size

Rasters are treated as immutable after construction; every operation that
produces new values returns a new raster.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import _interp


class GridFormatError(ValueError):
    """Raised for malformed ASCII grid files (header, tokens or dimensions)."""


class HazardClass(enum.IntEnum):
    """Vulnerability categories, ordered by increasing severity."""

    GREEN = 0
    YELLOW = 1
    RED = 2


#: 8-bit RGB overlay colors, one per hazard class.
HAZARD_COLORS = {
    HazardClass.GREEN: (0x00, 0xA0, 0x00),
    HazardClass.YELLOW: (0xFF, 0xD7, 0x00),
    HazardClass.RED: (0xD0, 0x00, 0x00),
}

#: Opacity of the hazard overlay on top of the hillshade background.
HAZARD_OVERLAY_OPACITY = 0.5

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass(frozen=True, eq=False)
class Raster:
    """A georeferenced grid of scalar values.

    Parameters
    ----------
    ncols, nrows : int
        Grid extent in cells.
    x_origin, y_origin : float
        World coordinates of the lower-left corner, meters.
    cell_size : float
        Cell edge length, meters (cells are square).
    values : ndarray, shape (nrows, ncols)
        Row-major values; row 0 is the northernmost row.
    nodata_value : float or None
        Sentinel marking cells without valid data. Cells whose stored value
        equals the sentinel (or is NaN) are nodata by definition, so no valid
        value can collide with it.
    """

    ncols: int
    nrows: int
    x_origin: float
    y_origin: float
    cell_size: float
    values: np.ndarray
    nodata_value: float | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(self.nrows, self.ncols)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.ncols < 1 or self.nrows < 1:
            raise ValueError("raster must have at least one cell")
        object.__setattr__(self, "_has_nodata", None)  # computed lazily

    @property
    def nodata_mask(self) -> np.ndarray:
        """Boolean mask of cells that carry no valid data."""
        mask = np.isnan(self.values)
        if self.nodata_value is not None:
            mask |= self.values == self.nodata_value
        return mask

    @property
    def has_nodata(self) -> bool:
        cached = object.__getattribute__(self, "_has_nodata")
        if cached is None:
            cached = bool(self.nodata_mask.any())
            object.__setattr__(self, "_has_nodata", cached)
        return cached

    @property
    def x_max(self) -> float:
        return self.x_origin + self.ncols * self.cell_size

    @property
    def y_max(self) -> float:
        return self.y_origin + self.nrows * self.cell_size

    def contains(self, x: float, y: float) -> bool:
        """True if the world point lies within the grid's outer bounds."""
        return (self.x_origin <= x <= self.x_max) and (self.y_origin <= y <= self.y_max)

    def cell_center(self, col, row):
        """World coordinates of one or more cell centers (row 0 = north)."""
        col = np.asarray(col)
        row = np.asarray(row)
        x = self.x_origin + (col + 0.5) * self.cell_size
        y = self.y_origin + (self.nrows - row - 0.5) * self.cell_size
        return x, y

    def same_geometry(self, other: "Raster") -> bool:
        return (
            self.ncols == other.ncols
            and self.nrows == other.nrows
            and self.x_origin == other.x_origin
            and self.y_origin == other.y_origin
            and self.cell_size == other.cell_size
        )

    def with_values(self, values: np.ndarray, nodata_value=None) -> "Raster":
        """New raster with the same geometry and different values."""
        return Raster(
            ncols=self.ncols,
            nrows=self.nrows,
            x_origin=self.x_origin,
            y_origin=self.y_origin,
            cell_size=self.cell_size,
            values=values,
            nodata_value=nodata_value,
        )


def load_ascii_grid(path) -> Raster:
    """Read an ESRI-style ASCII grid.

    The header must provide ``ncols``, ``nrows``, ``xllcorner``, ``yllcorner``
    and ``cellsize`` (case-insensitive, any order), optionally followed by
    ``nodata_value``. The body holds exactly nrows*ncols whitespace-separated
    numbers; the first body row is the northernmost.

    Raises
    ------
    GridFormatError
        On unknown/missing/duplicated header keys, non-numeric tokens
        (reported with their line number) or a value-count mismatch.
    """
    with open(path, "r") as f:
        lines = f.readlines()

    header: dict[str, float] = {}
    body_start = 0
    for lineno, line in enumerate(lines):
        parts = line.split()
        if not parts:
            body_start = lineno + 1
            continue
        if not parts[0][0].isalpha():
            body_start = lineno
            break
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            raise GridFormatError(f"{path}: unknown header key {parts[0]!r}")
        if len(parts) != 2:
            raise GridFormatError(f"{path}: header key {key!r} needs exactly one value")
        if key in header:
            raise GridFormatError(f"{path}: duplicated header key {key!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise GridFormatError(
                f"{path}: non-numeric value {parts[1]!r} for header key {key!r}"
            ) from None
        body_start = lineno + 1

    for key in _HEADER_KEYS[:5]:
        if key not in header:
            raise GridFormatError(f"{path}: missing header key {key!r}")

    ncols = int(header["ncols"])
    nrows = int(header["nrows"])
    if ncols != header["ncols"] or nrows != header["nrows"] or ncols < 1 or nrows < 1:
        raise GridFormatError(f"{path}: ncols/nrows must be positive integers")

    body = "".join(lines[body_start:])
    tokens = body.split()
    try:
        values = np.array(tokens, dtype=np.float64)
    except ValueError:
        # locate the offending token for the error message
        for lineno, line in enumerate(lines[body_start:], start=body_start + 1):
            for tok in line.split():
                try:
                    float(tok)
                except ValueError:
                    raise GridFormatError(
                        f"{path}: non-numeric token {tok!r} on line {lineno}"
                    ) from None
        raise GridFormatError(f"{path}: unparsable data block") from None

    if values.size != nrows * ncols:
        raise GridFormatError(
            f"{path}: expected {nrows * ncols} values ({nrows}x{ncols}), found {values.size}"
        )

    return Raster(
        ncols=ncols,
        nrows=nrows,
        x_origin=header["xllcorner"],
        y_origin=header["yllcorner"],
        cell_size=header["cellsize"],
        values=values.reshape(nrows, ncols),
        nodata_value=header.get("nodata_value"),
    )


def write_ascii_grid(raster: Raster, path) -> None:
    """Write a raster as an ESRI-style ASCII grid readable by `load_ascii_grid`.

    Values are formatted with ``repr`` (shortest exact decimal), so finite
    float64 values survive a write/load round trip bit-exactly.
    """
    with open(path, "w") as f:
        f.write(f"ncols {raster.ncols}\n")
        f.write(f"nrows {raster.nrows}\n")
        f.write(f"xllcorner {repr(float(raster.x_origin))}\n")
        f.write(f"yllcorner {repr(float(raster.y_origin))}\n")
        f.write(f"cellsize {repr(float(raster.cell_size))}\n")
        if raster.nodata_value is not None:
            f.write(f"nodata_value {repr(float(raster.nodata_value))}\n")
        for row in raster.values:
            f.write(" ".join(repr(float(v)) for v in row))
            f.write("\n")


def _fractional_index(raster: Raster, x, y):
    """Fractional (col, row) of world points, clamped to the cell-center lattice."""
    col = (np.asarray(x, dtype=np.float64) - raster.x_origin) / raster.cell_size - 0.5
    row = raster.nrows - 0.5 - (np.asarray(y, dtype=np.float64) - raster.y_origin) / raster.cell_size
    col = np.clip(col, 0.0, raster.ncols - 1.0)
    row = np.clip(row, 0.0, raster.nrows - 1.0)
    return col, row


def bilinear_sample_masked(raster: Raster, x, y):
    """Bilinear interpolation at world points, tolerant of nodata cells.

    Interpolates between the four surrounding cell centers. Points outside
    the cell-center lattice are clamped to its edge (flat extrapolation).
    Where any of the four neighbors is nodata, the value of the nearest
    valid neighbor is used instead and the point is flagged.

    Returns
    -------
    values : ndarray
        Interpolated values, same shape as ``x``.
    flagged : ndarray of bool
        True where the interpolation touched a nodata cell.
    """
    if raster.ncols < 2 or raster.nrows < 2:
        raise ValueError("bilinear sampling needs a raster of at least 2x2 cells")
    x = np.asarray(x, dtype=np.float64)
    if not raster.has_nodata:
        # compiled fast path, bit-identical to the expression below
        values = _interp.bilinear_grid(
            raster.values, x, np.asarray(y, dtype=np.float64),
            raster.x_origin, raster.y_origin, raster.cell_size,
        )
        if values.ndim == 0:
            return float(values), False
        return values, np.zeros(values.shape, dtype=bool)
    col, row = _fractional_index(raster, x, y)
    c0 = np.clip(np.floor(col).astype(np.intp), 0, raster.ncols - 2)
    r0 = np.clip(np.floor(row).astype(np.intp), 0, raster.nrows - 2)
    fc = col - c0
    fr = row - r0

    v = raster.values
    v00 = v[r0, c0]
    v01 = v[r0, c0 + 1]
    v10 = v[r0 + 1, c0]
    v11 = v[r0 + 1, c0 + 1]
    values = (
        (1.0 - fr) * ((1.0 - fc) * v00 + fc * v01)
        + fr * ((1.0 - fc) * v10 + fc * v11)
    )

    mask = raster.nodata_mask
    if mask.any():
        m00 = mask[r0, c0]
        m01 = mask[r0, c0 + 1]
        m10 = mask[r0 + 1, c0]
        m11 = mask[r0 + 1, c0 + 1]
        flagged = m00 | m01 | m10 | m11
        if flagged.any():
            # fall back to the nearest valid corner; invalid corners get inf distance
            d = np.stack(
                [
                    np.where(m00, np.inf, fc**2 + fr**2),
                    np.where(m01, np.inf, (1 - fc) ** 2 + fr**2),
                    np.where(m10, np.inf, fc**2 + (1 - fr) ** 2),
                    np.where(m11, np.inf, (1 - fc) ** 2 + (1 - fr) ** 2),
                ]
            )
            corner_vals = np.stack([v00, v01, v10, v11])
            nearest = np.argmin(d, axis=0)
            fallback = np.take_along_axis(corner_vals, nearest[None, ...], axis=0)[0]
            all_bad = m00 & m01 & m10 & m11
            fallback = np.where(all_bad, 0.0, fallback)
            values = np.where(flagged, fallback, values)
    else:
        flagged = np.zeros(np.shape(values), dtype=bool)

    if values.ndim == 0:
        return float(values), bool(flagged)
    return values, flagged


def bilinear_sample(raster: Raster, x: float, y: float) -> float:
    """Bilinear interpolation at a single world point (see `bilinear_sample_masked`)."""
    value, _ = bilinear_sample_masked(raster, x, y)
    return float(value)


def hillshade(raster: Raster, azimuth: float = 315.0, altitude: float = 45.0) -> Raster:
    """Lambertian hillshade of an elevation raster, values in [0, 1].

    Parameters
    ----------
    azimuth : float
        Light direction, degrees clockwise from north.
    altitude : float
        Light elevation above the horizon, degrees.

    Surface normals come from central differences (one-sided at the border).
    """
    if raster.ncols < 3 or raster.nrows < 3:
        raise ValueError("hillshade needs a raster of at least 3x3 cells")
    dz_drow, dz_dcol = np.gradient(raster.values, raster.cell_size)
    dz_dx = dz_dcol
    dz_dy = -dz_drow  # rows grow southward, y grows northward

    az = np.deg2rad(azimuth)
    alt = np.deg2rad(altitude)
    lx = np.sin(az) * np.cos(alt)
    ly = np.cos(az) * np.cos(alt)
    lz = np.sin(alt)

    norm = np.sqrt(dz_dx**2 + dz_dy**2 + 1.0)
    shade = (-dz_dx * lx - dz_dy * ly + lz) / norm
    return raster.with_values(np.clip(shade, 0.0, 1.0))


def render_hazard_png(hazard: Raster, shade: Raster, path) -> None:
    """Render a hazard-class raster over a hillshade background as an RGB PNG.

    ``hazard`` holds class labels (0 green, 1 yellow, 2 red). The class color
    is alpha-blended at `HAZARD_OVERLAY_OPACITY` over the grayscale shade;
    nodata cells show the bare shade.
    """
    if not hazard.same_geometry(shade):
        raise ValueError("hazard and shade rasters must share the same geometry")
    labels = np.rint(hazard.values).astype(np.int64)
    valid = ~hazard.nodata_mask
    if valid.any() and not np.isin(labels[valid], [0, 1, 2]).all():
        raise ValueError("hazard raster must contain class labels 0, 1 or 2")

    gray = np.clip(shade.values, 0.0, 1.0) * 255.0
    rgb = np.repeat(gray[:, :, None], 3, axis=2)

    palette = np.zeros((3, 3), dtype=np.float64)
    for cls, color in HAZARD_COLORS.items():
        palette[int(cls)] = color
    overlay = palette[np.clip(labels, 0, 2)]
    a = HAZARD_OVERLAY_OPACITY
    blended = (1.0 - a) * rgb + a * overlay
    rgb = np.where(valid[:, :, None], blended, rgb)

    img = np.rint(rgb).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")
