"""Synthetic alpine regions: terrain, snowfall and rule-based hazard labels.

The official hazard-zone maps the classifier was conceived for are not
freely available, so this module fabricates stand-ins that keep the whole
pipeline trainable and verifiable. Terrain comes from a ridge/valley
sinusoid carved by midpoint-displacement noise; snowfall follows elevation
plus smooth noise; labels come from a deterministic runout rule in the
spirit of classic angle-based avalanche models: steep, snow-loaded cells
release, and the descent path below them is classified by the sight-line
angle back to the release point.

Everything is a pure function of its seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .raster import HazardClass, Raster, load_ascii_grid, write_ascii_grid


@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic world and its labeling rule.

    ``alpha_red``/``alpha_yellow`` are the minimum sight-line angles (degrees,
    release cell to runout cell) for red and yellow labels; red zones are the
    steeper, shorter reach, so ``alpha_red > alpha_yellow``.
    """

    seed: int = 0
    size: int = 257  # grid edge, must be 2**n + 1
    cell_size: float = 40.0
    relief_amplitude: float = 900.0
    roughness: float = 0.55
    snow_base: float = 0.8
    snow_lapse: float = 1.0  # meters of snow per 1000 m elevation
    snow_noise: float = 0.25
    release_slope_lo: float = 28.0
    release_slope_hi: float = 50.0
    snow_threshold: float = 1.0
    alpha_red: float = 28.0
    alpha_yellow: float = 23.0

    def __post_init__(self):
        n = self.size - 1
        if n < 2 or n & (n - 1):
            raise ValueError(f"size must be 2**n + 1, got {self.size}")
        if not 0.0 < self.roughness < 1.0:
            raise ValueError("roughness must be in (0, 1)")
        if not self.release_slope_lo < self.release_slope_hi:
            raise ValueError("release slope window must satisfy lo < hi")
        if not self.alpha_red > self.alpha_yellow:
            raise ValueError("alpha_red must exceed alpha_yellow")


def _midpoint_displacement(n_levels: int, roughness: float, rng) -> np.ndarray:
    """Diamond-square noise on a (2**n + 1) square grid, O(1) displacement scale.

    The per-level displacement amplitude decays by ``roughness``, so values
    (and the field's variance) grow with it.
    """
    size = (1 << n_levels) + 1
    z = np.zeros((size, size))
    z[0, 0], z[0, -1], z[-1, 0], z[-1, -1] = rng.standard_normal(4)
    step = size - 1
    amp = 1.0
    while step > 1:
        half = step // 2
        amp *= roughness
        # diamond: centers of squares
        rows = np.arange(half, size, step)
        cols = np.arange(half, size, step)
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        z[rr, cc] = 0.25 * (
            z[rr - half, cc - half]
            + z[rr - half, cc + half]
            + z[rr + half, cc - half]
            + z[rr + half, cc + half]
        ) + amp * rng.standard_normal(rr.shape)
        # square: edge midpoints, averaging the in-grid axial neighbors
        mask = np.zeros((size, size), dtype=bool)
        mask[rows.reshape(-1, 1), np.arange(0, size, step)] = True
        mask[np.arange(0, size, step).reshape(-1, 1), cols] = True
        er, ec = np.nonzero(mask)
        acc = np.zeros(er.shape)
        cnt = np.zeros(er.shape)
        for dr, dc in ((-half, 0), (half, 0), (0, -half), (0, half)):
            nr, nc = er + dr, ec + dc
            ok = (nr >= 0) & (nr < size) & (nc >= 0) & (nc < size)
            acc[ok] += z[nr[ok], nc[ok]]
            cnt[ok] += 1
        z[er, ec] = acc / cnt + amp * rng.standard_normal(er.shape)
        step = half
    return z


def gen_terrain(cfg: SynthConfig) -> Raster:
    """Fractal elevation field with a large-scale ridge/valley structure."""
    n_levels = int(round(math.log2(cfg.size - 1)))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))

    extent = (cfg.size - 1) * cfg.cell_size
    x = np.arange(cfg.size) * cfg.cell_size
    xx, yy = np.meshgrid(x, x, indexing="xy")
    # valley axis in a random direction, wavelength a good fraction of the map
    phi = rng.uniform(0.0, math.pi)
    wavelength = extent / rng.uniform(1.6, 2.4)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    d = xx * math.cos(phi) + yy * math.sin(phi)
    base = np.cos(2.0 * math.pi * d / wavelength + phase)
    # a gentler cross ridge so valleys are carved, not perfectly straight
    d2 = xx * math.sin(phi) - yy * math.cos(phi)
    base = 0.75 * base + 0.25 * np.cos(2.0 * math.pi * d2 / (wavelength * 1.7))

    noise = _midpoint_displacement(n_levels, cfg.roughness, rng)
    z = cfg.relief_amplitude * (0.6 * base + 0.55 * noise)
    z = z - z.min()
    return Raster(
        ncols=cfg.size,
        nrows=cfg.size,
        x_origin=0.0,
        y_origin=0.0,
        cell_size=cfg.cell_size,
        values=z,
    )


def gen_snow(cfg: SynthConfig, terrain: Raster) -> Raster:
    """Expected extreme snowfall: base plus elevation lapse plus smooth noise."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    snow = cfg.snow_base + cfg.snow_lapse * terrain.values / 1000.0
    if cfg.snow_noise > 0.0:
        raw = rng.standard_normal(terrain.values.shape)
        smooth = gaussian_filter(raw, sigma=terrain.ncols / 16.0, mode="nearest")
        sd = smooth.std()
        if sd > 0:
            snow = snow + cfg.snow_noise * smooth / sd
    return terrain.with_values(np.maximum(snow, 0.0))


def slope_deg(terrain: Raster) -> Raster:
    """Slope angle in degrees from central-difference gradients."""
    if terrain.ncols < 3 or terrain.nrows < 3:
        raise ValueError("slope needs a raster of at least 3x3 cells")
    dz_drow, dz_dcol = np.gradient(terrain.values, terrain.cell_size)
    grad = np.hypot(dz_dcol, dz_drow)
    return terrain.with_values(np.degrees(np.arctan(grad)))


_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def oracle_hazard(cfg: SynthConfig, terrain: Raster, snow: Raster) -> Raster:
    """Rule-based hazard labels on the terrain grid.

    Release cells have slope inside the release window and snow at or above
    the threshold. From each release cell the steepest-descent path (8-cell
    neighborhood, ties to the lowest neighbor index, stopping at local
    minima or the map edge) is traced; a traversed cell is RED while the
    sight-line angle from the release cell stays >= alpha_red, YELLOW while
    >= alpha_yellow, and the trace stops once it drops below alpha_yellow.
    A cell's label is its maximum severity over all traces; untouched cells
    stay GREEN. Raising snow anywhere can only add release cells, so labels
    are monotone non-decreasing in snow depth.
    """
    if not terrain.same_geometry(snow):
        raise ValueError("terrain and snow rasters must share the same geometry")
    z = terrain.values
    nrows, ncols = z.shape
    slope = slope_deg(terrain).values
    release = (
        (slope >= cfg.release_slope_lo)
        & (slope <= cfg.release_slope_hi)
        & (snow.values >= cfg.snow_threshold)
    )

    # steepest-descent successor of every cell, precomputed vectorized:
    # stack the 8 shifted neighbor grids (inf outside) and take the argmin.
    shifted = np.full((len(_NEIGHBORS), nrows, ncols), np.inf)
    for k, (dr, dc) in enumerate(_NEIGHBORS):
        src_r = slice(max(dr, 0), nrows + min(dr, 0))
        src_c = slice(max(dc, 0), ncols + min(dc, 0))
        dst_r = slice(max(-dr, 0), nrows + min(-dr, 0))
        dst_c = slice(max(-dc, 0), ncols + min(-dc, 0))
        shifted[k][dst_r, dst_c] = z[src_r, src_c]
    lowest_k = np.argmin(shifted, axis=0)  # ties: lowest neighbor index
    lowest_z = np.take_along_axis(shifted, lowest_k[None], axis=0)[0]

    tan_red = math.tan(math.radians(cfg.alpha_red))
    tan_yellow = math.tan(math.radians(cfg.alpha_yellow))
    labels = np.zeros((nrows, ncols), dtype=np.int8)
    labels[release] = int(HazardClass.RED)

    cell = terrain.cell_size
    for r0, c0 in np.argwhere(release):
        z0 = z[r0, c0]
        r, c = r0, c0
        while True:
            if lowest_z[r, c] >= z[r, c]:
                break  # local minimum
            k = lowest_k[r, c]
            r += _NEIGHBORS[k][0]
            c += _NEIGHBORS[k][1]
            dist = cell * math.hypot(r - r0, c - c0)
            drop = z0 - z[r, c]
            if drop >= dist * tan_red:
                labels[r, c] = max(labels[r, c], int(HazardClass.RED))
            elif drop >= dist * tan_yellow:
                labels[r, c] = max(labels[r, c], int(HazardClass.YELLOW))
            else:
                break
    return terrain.with_values(labels.astype(np.float64))


@dataclass
class Region:
    """One synthetic (or loaded) region: aligned rasters plus identity."""

    region_id: str
    split: str  # "train" or "validation"
    terrain: Raster
    snow: Raster
    hazard: Raster

    def class_shares(self) -> np.ndarray:
        """Fractions of green/yellow/red cells."""
        labels = self.hazard.values[~self.hazard.nodata_mask].astype(np.int64)
        counts = np.bincount(labels, minlength=3)[:3]
        return counts / max(labels.size, 1)


def gen_region(cfg: SynthConfig, region_id: str, split: str) -> Region:
    terrain = gen_terrain(cfg)
    snow = gen_snow(cfg, terrain)
    hazard = oracle_hazard(cfg, terrain, snow)
    return Region(region_id=region_id, split=split, terrain=terrain, snow=snow, hazard=hazard)


def gen_dataset(cfg: SynthConfig, n_regions: int, validation_fraction: float,
                out_dir) -> Path:
    """Generate independent regions, write their grids, return the manifest path.

    Each region gets its own sub-seed derived from ``cfg.seed``. The last
    ``round(n_regions * validation_fraction)`` regions form the validation
    split (at least one when the fraction is positive). The manifest lists
    one region per line with its split, file paths and class shares.
    """
    if n_regions < 2:
        raise ValueError("need at least 2 regions (train and validation)")
    n_val = int(round(n_regions * validation_fraction))
    if validation_fraction > 0:
        n_val = max(n_val, 1)
    if n_val >= n_regions:
        raise ValueError("validation fraction leaves no training regions")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        "# avanet dataset manifest",
        "# region split terrain snow hazard green yellow red",
    ]
    for i in range(n_regions):
        region_id = f"region_{i:02d}"
        split = "validation" if i >= n_regions - n_val else "train"
        region_seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1)[0])
        region = gen_region(replace(cfg, seed=region_seed), region_id, split)
        region_dir = out_dir / region_id
        region_dir.mkdir(exist_ok=True)
        write_ascii_grid(region.terrain, region_dir / "terrain.asc")
        write_ascii_grid(region.snow, region_dir / "snow.asc")
        write_ascii_grid(region.hazard, region_dir / "hazard.asc")
        g, y, r = region.class_shares()
        lines.append(
            f"{region_id} {split} {region_id}/terrain.asc {region_id}/snow.asc "
            f"{region_id}/hazard.asc {g:.4f} {y:.4f} {r:.4f}"
        )
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(manifest_path) -> list[Region]:
    """Read the regions listed in a dataset manifest."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    regions = []
    for line in manifest_path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 5:
            raise ValueError(f"malformed manifest line: {line!r}")
        region_id, split, terrain_p, snow_p, hazard_p = parts[:5]
        regions.append(
            Region(
                region_id=region_id,
                split=split,
                terrain=load_ascii_grid(base / terrain_p),
                snow=load_ascii_grid(base / snow_p),
                hazard=load_ascii_grid(base / hazard_p),
            )
        )
    return regions
