"""Initial Gaussian clouds from an FBP reconstruction, or spread uniformly over its foreground."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import GridSpec, VoxelGrid
from .gaussian_model import GaussianCloud

log = logging.getLogger(__name__)


@dataclass
class InitConfig:
    num_gaussians: int = 15_000
    tau: float = 0.05
    neighbor_radius: float | None = None  # None: twice the voxel diagonal
    k_sigma: float = 0.12
    k_intensity: float = 0.3
    gradient_band: tuple[float, float] = (30.0, 90.0)
    uniform_scale: float = 0.1
    uniform_level: float = 1.0

    def __post_init__(self):
        self.gradient_band = tuple(float(b) for b in self.gradient_band)
        lo, hi = self.gradient_band
        if not 0 <= self.tau < 1:
            raise ValueError(f"tau must be in [0, 1), got {self.tau}")
        if not 0 <= lo < hi <= 100:
            raise ValueError(f"gradient_band must satisfy 0 <= lo < hi <= 100, got {self.gradient_band}")
        if self.k_sigma <= 0 or self.k_intensity <= 0:
            raise ValueError("k_sigma and k_intensity must be positive")
        if self.neighbor_radius is not None and self.neighbor_radius <= 0:
            raise ValueError("neighbor_radius must be positive")
        if self.num_gaussians < 1:
            raise ValueError("num_gaussians must be >= 1")
        if self.uniform_scale <= 0 or self.uniform_level <= 0:
            raise ValueError("uniform_scale and uniform_level must be positive")

    def radius_for(self, spec: GridSpec) -> float:
        if self.neighbor_radius is not None:
            return self.neighbor_radius
        return 2.0 * math.sqrt(sum(s * s for s in spec.spacing))


def threshold_fbp(fbp: VoxelGrid, tau: float) -> VoxelGrid:
    """Keep voxels strictly above ``tau``; zero the rest."""
    data = np.where(fbp.data > tau, fbp.data, 0.0)
    return VoxelGrid(fbp.spec, data)


def gradient_norm(grid: VoxelGrid) -> np.ndarray:
    """|grad| by central differences, one-sided at the borders."""
    data = grid.data
    sx, sy, sz = grid.spacing
    parts = []
    for axis, h in ((0, sz), (1, sy), (2, sx)):
        if data.shape[axis] < 2:
            parts.append(np.zeros_like(data))
        else:
            parts.append(np.gradient(data, h, axis=axis))
    return np.sqrt(sum(p * p for p in parts))


def select_centers(
    fbp_thresholded: VoxelGrid,
    count: int,
    gradient_band=(30.0, 90.0),
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """World coordinates of ``count`` voxel centers with medium gradient norm.

    Nonzero voxels whose gradient norm lies between the ``lo`` and ``hi``
    percentiles (inclusive) form the band; centers are drawn from it
    uniformly without replacement. A band that is too small is widened
    symmetrically toward (0, 100).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    data = fbp_thresholded.data
    flat_idx = np.flatnonzero(data.ravel() > 0)
    if flat_idx.size < count:
        raise ValueError(f"only {flat_idx.size} nonzero voxels, cannot place {count} centers")
    gn = gradient_norm(fbp_thresholded).ravel()[flat_idx]
    lo, hi = (float(b) for b in gradient_band)
    while True:
        p_lo, p_hi = np.percentile(gn, [lo, hi])
        band = flat_idx[(gn >= p_lo) & (gn <= p_hi)]
        if band.size >= count or (lo <= 0 and hi >= 100):
            break
        new_lo, new_hi = max(0.0, lo - 5.0), min(100.0, hi + 5.0)
        log.warning("gradient band (%g, %g) holds %d voxels < %d; widening to (%g, %g)",
                    lo, hi, band.size, count, new_lo, new_hi)
        lo, hi = new_lo, new_hi
    chosen = np.sort(rng.choice(band, size=count, replace=False))
    k, j, i = np.unravel_index(chosen, data.shape)
    return fbp_thresholded.spec.voxel_to_world(np.stack([i, j, k], axis=1).astype(np.float64))


@njit(cache=True)
def _hash_count(points, order, cell_of, starts, ncell, r2):
    n = points.shape[0]
    out = np.zeros(n, dtype=np.int64)
    cx_n, cy_n, cz_n = ncell[0], ncell[1], ncell[2]
    for p in range(n):
        ci = cell_of[p, 0]
        cj = cell_of[p, 1]
        ck = cell_of[p, 2]
        cnt = 0
        for dk in range(-1, 2):
            kk = ck + dk
            if kk < 0 or kk >= cz_n:
                continue
            for dj in range(-1, 2):
                jj = cj + dj
                if jj < 0 or jj >= cy_n:
                    continue
                for di in range(-1, 2):
                    ii = ci + di
                    if ii < 0 or ii >= cx_n:
                        continue
                    cell = (kk * cy_n + jj) * cx_n + ii
                    for q in range(starts[cell], starts[cell + 1]):
                        o = order[q]
                        if o == p:
                            continue
                        dx = points[o, 0] - points[p, 0]
                        dy = points[o, 1] - points[p, 1]
                        dz = points[o, 2] - points[p, 2]
                        if dx * dx + dy * dy + dz * dz <= r2:
                            cnt += 1
        out[p] = cnt
    return out


def count_neighbors(points, radius: float) -> np.ndarray:
    """Number of *other* points within Euclidean ``radius`` of each point.

    Exact: points are bucketed into a uniform hash grid whose cells are at
    least ``radius`` wide, and only the 27 surrounding cells are scanned.
    """
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    # cap the table at ~1e6 cells; larger cells keep the search exact
    cell = max(radius, float(span.max()) / 100.0, 1e-12)
    cell_of = np.floor((points - lo) / cell).astype(np.int64)
    ncell = cell_of.max(axis=0) + 1
    key = (cell_of[:, 2] * ncell[1] + cell_of[:, 1]) * ncell[0] + cell_of[:, 0]
    order = np.argsort(key, kind="stable")
    starts = np.searchsorted(key[order], np.arange(int(np.prod(ncell)) + 1))
    return _hash_count(points, order, cell_of, starts, ncell, radius * radius)


def _sample_at(grid: VoxelGrid, points) -> np.ndarray:
    idx = np.rint(grid.world_to_voxel(points)).astype(np.int64)
    return grid.data[idx[:, 2], idx[:, 1], idx[:, 0]]


def init_from_fbp(
    fbp: VoxelGrid,
    cfg: InitConfig,
    extent: float = 0.05,
    rng: np.random.Generator | None = None,
) -> GaussianCloud:
    """Centers from the medium-gradient band; radius ~ 1/neighbor count, intensity ~ FBP value."""
    rng = rng if rng is not None else np.random.default_rng(0)
    thr = threshold_fbp(fbp, cfg.tau)
    centers = select_centers(thr, cfg.num_gaussians, cfg.gradient_band, rng)
    counts = count_neighbors(centers, cfg.radius_for(fbp.spec))
    sigma = cfg.k_sigma / np.maximum(counts, 1)
    sigma = np.minimum(sigma, extent / 3.0)
    intensity = cfg.k_intensity * _sample_at(thr, centers)
    return GaussianCloud.from_params(centers, sigma, intensity, extent)


def init_uniform(
    fbp: VoxelGrid,
    cfg: InitConfig,
    extent: float = 0.05,
    rng: np.random.Generator | None = None,
) -> GaussianCloud:
    """Centers drawn uniformly over the foreground; one shared sigma and intensity."""
    rng = rng if rng is not None else np.random.default_rng(0)
    fg = np.flatnonzero(fbp.data.ravel() > cfg.tau)
    if fg.size == 0:
        raise ValueError(f"no foreground voxels above tau={cfg.tau}")
    if fg.size < cfg.num_gaussians:
        raise ValueError(f"foreground has {fg.size} voxels, fewer than num_gaussians={cfg.num_gaussians}")
    chosen = np.sort(rng.choice(fg, size=cfg.num_gaussians, replace=False))
    k, j, i = np.unravel_index(chosen, fbp.spec.shape)
    centers = fbp.spec.voxel_to_world(np.stack([i, j, k], axis=1).astype(np.float64))
    n = cfg.num_gaussians
    sigma = np.full(n, min(cfg.k_sigma * cfg.uniform_scale, extent / 3.0))
    intensity = np.full(n, cfg.k_intensity * cfg.uniform_level)
    return GaussianCloud.from_params(centers, sigma, intensity, extent)
