"""Cone-beam forward projection, its exact adjoint, and FDK reconstruction."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import ConeBeamGeometry, GridSpec, ProjectionStack, VoxelGrid


class FilterKind(str, enum.Enum):
    RAM_LAK = "ram-lak"


@dataclass(frozen=True)
class RampFilter:
    """Ramp filter; the response is cut off above ``frequency_scaling`` x Nyquist."""

    kind: FilterKind = FilterKind.RAM_LAK
    frequency_scaling: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.frequency_scaling <= 1.0:
            raise ValueError(f"frequency_scaling must be in (0, 1], got {self.frequency_scaling}")
        object.__setattr__(self, "kind", FilterKind(self.kind))

    def response(self, n: int, pixel: float) -> np.ndarray:
        """Real frequency response for an ``n``-point FFT on samples ``pixel`` apart.

        Built as the FFT of the band-limited spatial Ram-Lak kernel, which
        avoids the DC offset of a sampled ``|f|`` ramp.
        """
        k = np.fft.fftfreq(n, d=1.0 / n)  # signed integer lags
        h = np.zeros(n)
        h[0] = 1.0 / (4.0 * pixel * pixel)
        odd = (k.astype(np.int64) % 2) != 0
        h[odd] = -1.0 / (np.pi * k[odd] * pixel) ** 2
        resp = np.real(np.fft.fft(h)) * pixel
        freq = np.abs(np.fft.fftfreq(n))  # cycles per sample, Nyquist = 0.5
        resp[freq > 0.5 * self.frequency_scaling + 1e-12] = 0.0
        return resp


def default_step(spec: GridSpec) -> float:
    return 0.5 * min(spec.spacing)


def _check_source_outside(spec: GridSpec, geom: ConeBeamGeometry):
    lo = np.asarray(spec.origin) - np.asarray(spec.spacing)
    hi = np.asarray(spec.origin) + np.asarray(spec.dims) * np.asarray(spec.spacing)
    src = geom.source_positions()
    inside = np.all((src > lo) & (src < hi), axis=1)
    if np.any(inside):
        raise ValueError("X-ray source lies inside the volume bounding box")


def _frames(geom: ConeBeamGeometry):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in geom.frames())


def forward_array(vol: np.ndarray, spec: GridSpec, geom: ConeBeamGeometry, step: float | None = None) -> np.ndarray:
    """Line integrals of the trilinear interpolant of ``vol`` for every detector pixel."""
    _check_source_outside(spec, geom)
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    if vol.shape != spec.shape:
        raise ValueError(f"volume shape {vol.shape} does not match grid {spec.shape}")
    out = np.empty(geom.proj_shape)
    src, pix00, cstep, rstep = _frames(geom)
    _kernels.forward_kernel(
        vol,
        np.asarray(spec.origin),
        np.asarray(spec.spacing),
        src,
        pix00,
        cstep,
        rstep,
        float(step or default_step(spec)),
        out,
    )
    return out


def adjoint_array(proj: np.ndarray, spec: GridSpec, geom: ConeBeamGeometry, step: float | None = None) -> np.ndarray:
    """Exact transpose of :func:`forward_array`."""
    _check_source_outside(spec, geom)
    proj = np.ascontiguousarray(proj, dtype=np.float64)
    if proj.shape != geom.proj_shape:
        raise ValueError(f"projection shape {proj.shape} does not match geometry {geom.proj_shape}")
    partial = np.zeros((geom.num_views,) + spec.shape)
    src, pix00, cstep, rstep = _frames(geom)
    _kernels.adjoint_kernel(
        proj,
        np.asarray(spec.origin),
        np.asarray(spec.spacing),
        src,
        pix00,
        cstep,
        rstep,
        float(step or default_step(spec)),
        partial,
    )
    out = np.zeros(spec.shape)
    _kernels.sum_partials(partial, out)
    return out


def forward_project(grid: VoxelGrid, geom: ConeBeamGeometry, step: float | None = None) -> ProjectionStack:
    """Ray-driven projection with trilinear sampling at a fixed step along each ray."""
    return ProjectionStack(geom, forward_array(grid.data, grid.spec, geom, step))


def back_project(proj: ProjectionStack, grid_spec: GridSpec, step: float | None = None) -> VoxelGrid:
    """Adjoint of :func:`forward_project`: scatters each detector value along its ray."""
    return VoxelGrid(grid_spec, adjoint_array(proj.data, grid_spec, proj.geometry, step))


def fbp_reconstruct(
    proj: ProjectionStack,
    grid_spec: GridSpec,
    filter: RampFilter | None = None,
) -> VoxelGrid:
    """FDK reconstruction for the circular trajectory.

    Cosine pre-weighting, row-wise ramp filtering on a zero-padded FFT,
    voxel-driven backprojection with the ``(D / (D - s))^2`` weight, and
    ``pi / views`` angular weighting. The result is clamped to be nonnegative.
    """
    filter = filter or RampFilter()
    geom = proj.geometry
    if proj.data.shape != geom.proj_shape:
        raise ValueError(f"projection shape {proj.data.shape} does not match geometry {geom.proj_shape}")
    rows, cols = geom.detector_shape
    row_pitch, col_pitch = geom.detector_pixel_size
    sdd = geom.source_distance + geom.detector_distance
    scale = geom.source_distance / sdd  # detector -> isocenter plane

    u = (np.arange(cols) - 0.5 * (cols - 1)) * col_pitch
    v = (np.arange(rows) - 0.5 * (rows - 1)) * row_pitch
    cosw = sdd / np.sqrt(sdd**2 + u[None, :] ** 2 + v[:, None] ** 2)
    weighted = proj.data * cosw[None]

    n_fft = 1 << max(1, math.ceil(math.log2(2 * cols)))
    resp = filter.response(n_fft, col_pitch * scale)
    spectrum = np.fft.rfft(weighted, n=n_fft, axis=-1)
    filtered = np.fft.irfft(spectrum * resp[: n_fft // 2 + 1], n=n_fft, axis=-1)[..., :cols]
    filtered = np.ascontiguousarray(filtered)

    # semicircle treated as a full scan: each view stands for pi/V radians
    weights = np.full(geom.num_views, (math.pi / geom.num_views) * scale * scale)
    xs, ys, zs = grid_spec.axis_centers()
    out = np.zeros(grid_spec.shape)
    src, pix00, cstep, rstep = _frames(geom)
    _kernels.fdk_backproject_kernel(filtered, xs, ys, zs, src, pix00, cstep, rstep, weights, out)
    np.maximum(out, 0.0, out=out)
    return VoxelGrid(grid_spec, out)
