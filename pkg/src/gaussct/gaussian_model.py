"""Isotropic 3D Gaussian cloud: rasterization onto voxels and parameter gradients.

Each Gaussian contributes ``I * exp(-|x - mu|^2 / (2 sigma^2))`` at ``x``. The
contribution is evaluated only on voxel centers inside the axis-aligned box
``mu +/- d`` (``d`` is the cloud-wide ``extent``), intersected with the grid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit, prange

from .geometry import GridSpec, VoxelGrid

# z-slabs handed to rasterizer workers; slabs never share voxels
_RASTER_SLABS = 16


@dataclass(frozen=True)
class Gaussian:
    mu: tuple[float, float, float]
    sigma: float
    intensity: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.intensity >= 0:
            raise ValueError(f"intensity must be nonnegative, got {self.intensity}")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError(f"mu must be finite, got {self.mu}")


def eval_gaussian(g: Gaussian, x) -> float:
    """Value of a single Gaussian at world point ``x``."""
    r2 = float(np.sum((np.asarray(x, dtype=np.float64) - np.asarray(g.mu)) ** 2))
    return g.intensity * math.exp(-r2 / (2.0 * g.sigma * g.sigma))


@dataclass
class GaussianCloud:
    """Gaussians stored as parallel arrays plus optimizer and densification state.

    ``log_sigma`` is the optimized parameter; ``sigma`` is derived from it.
    Adam moments (``m_*``, ``v_*``), the per-Gaussian Adam step count ``steps``
    and gradient statistics (``grad_accum``,
    ``grad_count``, ``grad_vec``) are kept row-aligned with the Gaussians so that
    densification can reindex everything in one place.
    """

    mu: np.ndarray
    log_sigma: np.ndarray
    intensity: np.ndarray
    extent: float
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None
    grad_vec: np.ndarray = None
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mu = np.ascontiguousarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = self.mu.shape[0]
        self.log_sigma = np.ascontiguousarray(self.log_sigma, dtype=np.float64).reshape(n)
        self.intensity = np.ascontiguousarray(self.intensity, dtype=np.float64).reshape(n)
        if not self.extent > 0:
            raise ValueError(f"extent must be positive, got {self.extent}")
        self.extent = float(self.extent)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n, dtype=np.int64)
        if self.grad_vec is None:
            self.grad_vec = np.zeros((n, 3))
        if not self.moments:
            self.reset_moments()

    @classmethod
    def from_params(cls, mu, sigma, intensity, extent: float) -> "GaussianCloud":
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(sigma <= 0):
            raise ValueError("sigma must be positive")
        return cls(np.asarray(mu), np.log(sigma), np.asarray(intensity), extent)

    @classmethod
    def from_gaussians(cls, gaussians, extent: float) -> "GaussianCloud":
        gaussians = list(gaussians)
        return cls.from_params(
            [g.mu for g in gaussians],
            [g.sigma for g in gaussians],
            [g.intensity for g in gaussians],
            extent,
        )

    def __len__(self) -> int:
        return self.mu.shape[0]

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @property
    def gaussians(self) -> list[Gaussian]:
        s = self.sigma
        return [Gaussian(tuple(self.mu[i]), float(s[i]), float(self.intensity[i])) for i in range(len(self))]

    def reset_grad_stats(self):
        n = len(self)
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n, dtype=np.int64)
        self.grad_vec = np.zeros((n, 3))

    def reset_moments(self):
        n = len(self)
        self.moments = {
            "m_mu": np.zeros((n, 3)),
            "v_mu": np.zeros((n, 3)),
            "m_s": np.zeros(n),
            "v_s": np.zeros(n),
            "m_i": np.zeros(n),
            "v_i": np.zeros(n),
            "steps": np.zeros(n, dtype=np.int64),
        }

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.mu.copy(),
            self.log_sigma.copy(),
            self.intensity.copy(),
            self.extent,
            self.grad_accum.copy(),
            self.grad_count.copy(),
            self.grad_vec.copy(),
            {k: v.copy() for k, v in self.moments.items()},
        )

    def select(self, idx) -> "GaussianCloud":
        """New cloud holding rows ``idx`` (index array or boolean mask), state included."""
        return GaussianCloud(
            self.mu[idx],
            self.log_sigma[idx],
            self.intensity[idx],
            self.extent,
            self.grad_accum[idx],
            self.grad_count[idx],
            self.grad_vec[idx],
            {k: v[idx] for k, v in self.moments.items()},
        )

    def check_aligned(self):
        n = len(self)
        arrays = [
            self.log_sigma,
            self.intensity,
            self.grad_accum,
            self.grad_count,
            self.grad_vec,
            *self.moments.values(),
        ]
        if any(a.shape[0] != n for a in arrays):
            raise ValueError("per-Gaussian state arrays are misaligned with the cloud")

    def canonical_order(self) -> np.ndarray:
        """Order independent of how the rows happen to be stored."""
        return np.lexsort(
            (self.intensity, self.log_sigma, self.mu[:, 2], self.mu[:, 1], self.mu[:, 0])
        )


def _footprint_arrays(cloud: GaussianCloud, order=None):
    if order is None:
        order = cloud.canonical_order()
    return (
        np.ascontiguousarray(cloud.mu[order]),
        np.ascontiguousarray(cloud.sigma[order]),
        np.ascontiguousarray(cloud.intensity[order]),
    )


@njit(cache=True, inline="always")
def _axis_range(m, d, o, s, n):
    lo = int(math.ceil((m - d - o) / s))
    hi = int(math.floor((m + d - o) / s))
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    return lo, hi


@njit(cache=True, parallel=True)
def _raster_kernel(mu, sigma, inten, d, origin, spacing, nslab, out):
    # each worker owns a z-slab of the output and visits every Gaussian in
    # the given order, so per-voxel summation order is fixed by that order
    nz, ny, nx = out.shape
    n = mu.shape[0]
    per = (nz + nslab - 1) // nslab
    for c in prange(nslab):
        z_lo = c * per
        z_hi = min(nz, (c + 1) * per) - 1
        ex = np.empty(nx)
        ey = np.empty(ny)
        ez = np.empty(nz)
        for g in range(n):
            k0, k1 = _axis_range(mu[g, 2], d, origin[2], spacing[2], nz)
            if k0 < z_lo:
                k0 = z_lo
            if k1 > z_hi:
                k1 = z_hi
            if k1 < k0:
                continue
            i0, i1 = _axis_range(mu[g, 0], d, origin[0], spacing[0], nx)
            j0, j1 = _axis_range(mu[g, 1], d, origin[1], spacing[1], ny)
            if i1 < i0 or j1 < j0:
                continue
            inv = 1.0 / (2.0 * sigma[g] * sigma[g])
            for i in range(i0, i1 + 1):
                t = origin[0] + i * spacing[0] - mu[g, 0]
                ex[i] = math.exp(-t * t * inv)
            for j in range(j0, j1 + 1):
                t = origin[1] + j * spacing[1] - mu[g, 1]
                ey[j] = math.exp(-t * t * inv)
            for k in range(k0, k1 + 1):
                t = origin[2] + k * spacing[2] - mu[g, 2]
                ez[k] = math.exp(-t * t * inv)
            amp = inten[g]
            for k in range(k0, k1 + 1):
                az = amp * ez[k]
                for j in range(j0, j1 + 1):
                    azy = az * ey[j]
                    for i in range(i0, i1 + 1):
                        out[k, j, i] += azy * ex[i]


@njit(cache=True, parallel=True)
def _grad_kernel(mu, sigma, inten, d, origin, spacing, adj, g_mu, g_sigma, g_int):
    nz, ny, nx = adj.shape
    n = mu.shape[0]
    for g in prange(n):
        s2 = sigma[g] * sigma[g]
        inv = 1.0 / (2.0 * s2)
        i0, i1 = _axis_range(mu[g, 0], d, origin[0], spacing[0], nx)
        j0, j1 = _axis_range(mu[g, 1], d, origin[1], spacing[1], ny)
        k0, k1 = _axis_range(mu[g, 2], d, origin[2], spacing[2], nz)
        s0 = 0.0
        sx = 0.0
        sy = 0.0
        sz = 0.0
        sr = 0.0
        if i1 >= i0 and j1 >= j0 and k1 >= k0:
            # the exponential factorizes per axis; moments of the adjoint
            # are gathered along x first, then folded over y and z
            tx = np.empty(i1 - i0 + 1)
            ex = np.empty(i1 - i0 + 1)
            for i in range(i0, i1 + 1):
                t = origin[0] + i * spacing[0] - mu[g, 0]
                tx[i - i0] = t
                ex[i - i0] = math.exp(-t * t * inv)
            for k in range(k0, k1 + 1):
                tz = origin[2] + k * spacing[2] - mu[g, 2]
                ez = math.exp(-tz * tz * inv)
                for j in range(j0, j1 + 1):
                    ty = origin[1] + j * spacing[1] - mu[g, 1]
                    ezy = ez * math.exp(-ty * ty * inv)
                    a0 = 0.0
                    a1 = 0.0
                    a2 = 0.0
                    for i in range(i0, i1 + 1):
                        w = adj[k, j, i] * ex[i - i0]
                        t = tx[i - i0]
                        a0 += w
                        a1 += w * t
                        a2 += w * t * t
                    a0 *= ezy
                    a1 *= ezy
                    a2 *= ezy
                    s0 += a0
                    sx += a1
                    sy += a0 * ty
                    sz += a0 * tz
                    sr += a2 + a0 * (ty * ty + tz * tz)
        amp = inten[g]
        g_int[g] = s0
        g_mu[g, 0] = amp * sx / s2
        g_mu[g, 1] = amp * sy / s2
        g_mu[g, 2] = amp * sz / s2
        g_sigma[g] = amp * sr / (s2 * sigma[g])


def rasterize(cloud: GaussianCloud, grid_spec: GridSpec) -> VoxelGrid:
    """Sum of truncated Gaussian contributions at every voxel center.

    Every voxel sums its contributions in :meth:`GaussianCloud.canonical_order`,
    so the output is bit-identical under any permutation of the stored rows
    and unaffected by dropping zero-intensity Gaussians.
    """
    if len(cloud) == 0:
        return grid_spec.zeros()
    mu, sigma, inten = _footprint_arrays(cloud)
    out = np.zeros(grid_spec.shape)
    nslab = min(_RASTER_SLABS, grid_spec.shape[0])
    _raster_kernel(
        mu, sigma, inten, cloud.extent, np.asarray(grid_spec.origin), np.asarray(grid_spec.spacing), nslab, out
    )
    return VoxelGrid(grid_spec, out)


def rasterize_with_grads(cloud: GaussianCloud, grid_spec: GridSpec, voxel_adjoint) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Contract ``voxel_adjoint`` (dL/dV) against each Gaussian's parameter derivatives.

    Returns ``(d_mu, d_sigma, d_intensity)`` with shapes ``(N, 3)``, ``(N,)``,
    ``(N,)``, in the cloud's stored row order. The footprint is the same
    truncated box used by :func:`rasterize`.
    """
    adj = voxel_adjoint.data if isinstance(voxel_adjoint, VoxelGrid) else voxel_adjoint
    adj = np.ascontiguousarray(adj, dtype=np.float64)
    if adj.shape != grid_spec.shape:
        raise ValueError(f"voxel adjoint shape {adj.shape} does not match grid {grid_spec.shape}")
    n = len(cloud)
    g_mu = np.zeros((n, 3))
    g_sigma = np.zeros(n)
    g_int = np.zeros(n)
    if n:
        _grad_kernel(
            cloud.mu,
            cloud.sigma,
            cloud.intensity,
            cloud.extent,
            np.asarray(grid_spec.origin),
            np.asarray(grid_spec.spacing),
            adj,
            g_mu,
            g_sigma,
            g_int,
        )
    return g_mu, g_sigma, g_int


def save_cloud(cloud: GaussianCloud, path, iteration: int = 0) -> None:
    """Raw little-endian float32 records ``(mu_x, mu_y, mu_z, sigma, I)`` plus a JSON sidecar."""
    path = Path(path)
    rec = np.column_stack([cloud.mu, cloud.sigma, cloud.intensity]).astype("<f4")
    rec.tofile(path)
    meta = {"count": len(cloud), "extent_d": cloud.extent, "iteration": int(iteration)}
    path.with_name(path.name + ".json").write_text(json.dumps(meta))


def load_cloud(path) -> tuple[GaussianCloud, int]:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    rec = np.fromfile(path, dtype="<f4")
    if rec.size != 5 * meta["count"]:
        raise ValueError(f"{path}: expected {meta['count']} records, file holds {rec.size / 5:g}")
    rec = rec.astype(np.float64).reshape(-1, 5)
    cloud = GaussianCloud.from_params(rec[:, :3], rec[:, 3], rec[:, 4], meta["extent_d"])
    return cloud, int(meta["iteration"])
