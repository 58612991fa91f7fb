"""Scan geometry, voxel grids and projection stacks.

World frame: the normalized cube [0, 1]^3. Volume arrays are stored with
shape ``(nz, ny, nx)`` in C order, so x is the fastest-varying index.
Projection arrays have shape ``(views, rows, cols)``.

The scanner rotates about the z axis through ``isocenter``. For view angle
``theta`` the source sits at ``isocenter + source_distance * (cos, sin, 0)``
and the detector plane is centered at
``isocenter - detector_distance * (cos, sin, 0)``; detector columns run along
``(-sin, cos, 0)`` and rows along ``+z``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Shape and placement of a voxel grid (no data).

    ``origin`` is the world position of the center of voxel (0, 0, 0).
    """

    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three integers >= 1, got {self.dims}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        origin = tuple(float(o) for o in self.origin)
        if len(origin) != 3:
            raise ValueError(f"origin must have three components, got {self.origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        lo, hi = self.bounds()
        tol = 1e-9
        if np.any(lo < -tol) or np.any(hi > 1.0 + tol):
            raise ValueError(f"grid bounding box {lo}..{hi} leaves the unit cube")

    @classmethod
    def unit_cube(cls, nx: int, ny: int | None = None, nz: int | None = None) -> "GridSpec":
        """Grid whose voxels exactly tile [0, 1]^3."""
        ny = nx if ny is None else ny
        nz = nx if nz is None else nz
        spacing = (1.0 / nx, 1.0 / ny, 1.0 / nz)
        origin = tuple(0.5 * s for s in spacing)
        return cls((nx, ny, nz), origin, spacing)

    def refined(self, factor: int) -> "GridSpec":
        """Same bounding box with every voxel cut into ``factor``^3 sub-voxels."""
        if factor < 1:
            raise ValueError(f"refinement factor must be >= 1, got {factor}")
        lo, _ = self.bounds()
        spacing = tuple(s / factor for s in self.spacing)
        origin = tuple(float(l + 0.5 * s) for l, s in zip(lo, spacing))
        return GridSpec(tuple(n * factor for n in self.dims), origin, spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        """Array shape ``(nz, ny, nx)``."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def size(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """World bounding box covered by the voxels (faces, not centers)."""
        o = np.asarray(self.origin)
        s = np.asarray(self.spacing)
        n = np.asarray(self.dims)
        return o - 0.5 * s, o + (n - 0.5) * s

    def world_to_voxel(self, p) -> np.ndarray:
        """Continuous voxel coordinates of world point(s) ``p`` (last axis xyz)."""
        p = np.asarray(p, dtype=np.float64)
        return (p - np.asarray(self.origin)) / np.asarray(self.spacing)

    def voxel_to_world(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return np.asarray(self.origin) + v * np.asarray(self.spacing)

    def axis_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World coordinates of voxel centers along x, y and z."""
        return tuple(
            self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)
        )

    def zeros(self) -> "VoxelGrid":
        return VoxelGrid(self, np.zeros(self.shape))

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}


@dataclass
class VoxelGrid:
    """Dense scalar field on a :class:`GridSpec`; ``data`` has shape ``(nz, ny, nx)``."""

    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != self.spec.shape:
            if self.data.size != self.spec.size:
                raise ValueError(
                    f"data has {self.data.size} values, grid {self.spec.dims} needs {self.spec.size}"
                )
            self.data = self.data.reshape(self.spec.shape)

    @property
    def dims(self):
        return self.spec.dims

    @property
    def origin(self):
        return self.spec.origin

    @property
    def spacing(self):
        return self.spec.spacing

    def world_to_voxel(self, p):
        return self.spec.world_to_voxel(p)

    def voxel_to_world(self, v):
        return self.spec.voxel_to_world(v)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.spec, self.data.copy())


@dataclass(frozen=True)
class ConeBeamGeometry:
    """Circular cone-beam trajectory with a flat detector.

    ``detector_shape`` is ``(rows, cols)`` and ``detector_pixel_size`` the
    matching ``(row_pitch, col_pitch)`` in world units.
    """

    source_distance: float
    detector_distance: float
    detector_shape: tuple[int, int]
    detector_pixel_size: tuple[float, float]
    angles: tuple[float, ...]
    isocenter: tuple[float, float, float] = field(default=(0.5, 0.5, 0.5))

    def __post_init__(self):
        if not self.source_distance > 0 or not self.detector_distance > 0:
            raise ValueError("source and detector distances must be positive")
        shape = tuple(int(n) for n in self.detector_shape)
        if len(shape) != 2 or min(shape) < 1:
            raise ValueError(f"detector_shape must be two integers >= 1, got {self.detector_shape}")
        pix = tuple(float(p) for p in self.detector_pixel_size)
        if len(pix) != 2 or min(pix) <= 0:
            raise ValueError(f"detector pixel sizes must be positive, got {self.detector_pixel_size}")
        angles = tuple(float(a) for a in self.angles)
        if not angles:
            raise ValueError("at least one view angle is required")
        a = np.asarray(angles)
        if np.any(a < 0) or np.any(a >= 2 * math.pi):
            raise ValueError("view angles must lie in [0, 2*pi)")
        if np.any(np.diff(a) <= 0):
            raise ValueError("view angles must be strictly increasing")
        object.__setattr__(self, "detector_shape", shape)
        object.__setattr__(self, "detector_pixel_size", pix)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "source_distance", float(self.source_distance))
        object.__setattr__(self, "detector_distance", float(self.detector_distance))
        object.__setattr__(self, "isocenter", tuple(float(c) for c in self.isocenter))

    @property
    def num_views(self) -> int:
        return len(self.angles)

    @property
    def rows(self) -> int:
        return self.detector_shape[0]

    @property
    def cols(self) -> int:
        return self.detector_shape[1]

    @property
    def proj_shape(self) -> tuple[int, int, int]:
        return (self.num_views, self.rows, self.cols)

    def frames(self):
        """Per-view source positions and detector sampling frames.

        Returns ``(src, pix00, col_step, row_step)``, each of shape
        ``(views, 3)``: the source, the center of detector pixel (0, 0), and
        the world offsets between neighbouring columns and rows.
        """
        th = np.asarray(self.angles)
        c, s = np.cos(th), np.sin(th)
        iso = np.asarray(self.isocenter)
        radial = np.stack([c, s, np.zeros_like(c)], axis=1)
        u_hat = np.stack([-s, c, np.zeros_like(c)], axis=1)
        v_hat = np.tile([0.0, 0.0, 1.0], (len(th), 1))
        src = iso + self.source_distance * radial
        det_center = iso - self.detector_distance * radial
        row_pitch, col_pitch = self.detector_pixel_size
        col_step = col_pitch * u_hat
        row_step = row_pitch * v_hat
        pix00 = det_center - 0.5 * (self.cols - 1) * col_step - 0.5 * (self.rows - 1) * row_step
        return src, pix00, col_step, row_step

    def source_positions(self) -> np.ndarray:
        return self.frames()[0]

    def to_dict(self) -> dict:
        return {
            "source_distance": self.source_distance,
            "detector_distance": self.detector_distance,
            "detector_shape": list(self.detector_shape),
            "detector_pixel_size": list(self.detector_pixel_size),
            "angles": list(self.angles),
            "isocenter": list(self.isocenter),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConeBeamGeometry":
        return cls(
            source_distance=d["source_distance"],
            detector_distance=d["detector_distance"],
            detector_shape=tuple(d["detector_shape"]),
            detector_pixel_size=tuple(d["detector_pixel_size"]),
            angles=tuple(d["angles"]),
            isocenter=tuple(d.get("isocenter", (0.5, 0.5, 0.5))),
        )


@dataclass
class ProjectionStack:
    """Detector measurements for every view, ``data`` shaped ``(views, rows, cols)``."""

    geometry: ConeBeamGeometry
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        shape = self.geometry.proj_shape
        if self.data.shape != shape:
            if self.data.size != int(np.prod(shape)):
                raise ValueError(
                    f"projection data has {self.data.size} values, geometry needs {shape}"
                )
            self.data = self.data.reshape(shape)


def make_semicircle_geometry(
    num_views: int,
    detector_shape: Sequence[int] = (128, 200),
    source_distance: float = 2.0,
    detector_distance: float = 2.0,
    pixel_size: Sequence[float] = (0.025, 0.025),
) -> ConeBeamGeometry:
    """Views at ``k * pi / num_views`` for ``k = 0 .. num_views - 1``.

    The semicircle is half-open, so opposed duplicate rays never occur.
    """
    if int(num_views) != num_views or num_views < 1:
        raise ValueError(f"num_views must be a positive integer, got {num_views}")
    if source_distance <= 0 or detector_distance <= 0:
        raise ValueError("source and detector distances must be positive")
    if len(pixel_size) != 2 or min(pixel_size) <= 0:
        raise ValueError(f"pixel sizes must be positive, got {pixel_size}")
    angles = tuple(k * math.pi / num_views for k in range(int(num_views)))
    return ConeBeamGeometry(
        source_distance=source_distance,
        detector_distance=detector_distance,
        detector_shape=tuple(detector_shape),
        detector_pixel_size=tuple(pixel_size),
        angles=angles,
    )
