"""Synthetic ellipsoid phantoms and raw-float volume / projection files.

Volume files are raw little-endian float32 in x-fastest order with a JSON
sidecar ``<path>.json`` holding ``dims``, ``spacing`` and ``origin``.
Projection files are raw little-endian float32 in (view, row, col) order with
a sidecar holding ``views``, ``rows``, ``cols``, ``angles`` and ``geometry``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import ConeBeamGeometry, GridSpec, ProjectionStack, VoxelGrid

_LE_F32 = np.dtype("<f4")


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    axes: tuple[float, float, float]
    intensity: float
    angle: float = 0.0  # rotation about z, radians


def _as_ellipsoid(e) -> Ellipsoid:
    if isinstance(e, Ellipsoid):
        return e
    if isinstance(e, dict):
        return Ellipsoid(
            tuple(e["center"]), tuple(e["axes"]), float(e["intensity"]), float(e.get("angle", 0.0))
        )
    center, axes, intensity, *rest = e
    return Ellipsoid(tuple(center), tuple(axes), float(intensity), float(rest[0]) if rest else 0.0)


ABDOMEN = (
    Ellipsoid((0.50, 0.50, 0.50), (0.40, 0.30, 0.42), 0.35),  # body
    Ellipsoid((0.37, 0.47, 0.52), (0.14, 0.11, 0.25), 0.15, 0.3),  # liver
    Ellipsoid((0.63, 0.40, 0.56), (0.09, 0.07, 0.12), -0.15, 0.4),  # stomach
    Ellipsoid((0.63, 0.61, 0.46), (0.05, 0.07, 0.10), 0.20, 0.2),  # kidneys
    Ellipsoid((0.37, 0.63, 0.44), (0.05, 0.07, 0.10), 0.20, -0.2),
    Ellipsoid((0.50, 0.72, 0.50), (0.05, 0.045, 0.40), 0.50),  # spine
    Ellipsoid((0.56, 0.62, 0.50), (0.025, 0.025, 0.38), 0.25),  # aorta
    Ellipsoid((0.44, 0.36, 0.34), (0.03, 0.03, 0.03), 0.40),  # inserts
    Ellipsoid((0.58, 0.50, 0.66), (0.025, 0.025, 0.025), 0.40),
    Ellipsoid((0.50, 0.44, 0.30), (0.02, 0.02, 0.02), 0.50),
)

CHEST = (
    Ellipsoid((0.50, 0.50, 0.50), (0.42, 0.30, 0.45), 0.45),  # body
    Ellipsoid((0.32, 0.48, 0.50), (0.13, 0.17, 0.36), -0.35),  # lungs
    Ellipsoid((0.68, 0.48, 0.50), (0.13, 0.17, 0.36), -0.35),
    Ellipsoid((0.55, 0.56, 0.42), (0.09, 0.08, 0.12), 0.10),  # heart
    Ellipsoid((0.50, 0.74, 0.50), (0.05, 0.045, 0.42), 0.50),  # spine
    Ellipsoid((0.50, 0.40, 0.72), (0.018, 0.018, 0.18), -0.45),  # trachea
    Ellipsoid((0.30, 0.44, 0.50), (0.012, 0.012, 0.24), 0.45),  # airway walls / vessels
    Ellipsoid((0.36, 0.54, 0.46), (0.010, 0.010, 0.22), 0.45),
    Ellipsoid((0.66, 0.44, 0.52), (0.012, 0.012, 0.24), 0.45),
    Ellipsoid((0.72, 0.54, 0.48), (0.010, 0.010, 0.22), 0.45),
    Ellipsoid((0.32, 0.50, 0.62), (0.10, 0.010, 0.010), 0.45, 0.5),
    Ellipsoid((0.68, 0.50, 0.38), (0.10, 0.010, 0.010), 0.45, -0.5),
)

PRESETS = {"abdomen": ABDOMEN, "chest": CHEST}


def render_ellipsoid_phantom(spec: Iterable | str, grid_spec: GridSpec) -> VoxelGrid:
    """Sum the intensities of all ellipsoids containing each voxel center, then clamp to [0, 1].

    ``spec`` is a preset name (``"abdomen"`` or ``"chest"``) or a sequence of
    ellipsoids (``Ellipsoid``, dicts, or ``(center, axes, intensity[, angle])``).
    """
    if isinstance(spec, str):
        try:
            spec = PRESETS[spec]
        except KeyError:
            raise ValueError(f"unknown phantom preset {spec!r}; choose from {sorted(PRESETS)}") from None
    ellipsoids = [_as_ellipsoid(e) for e in spec]
    if not ellipsoids:
        raise ValueError("phantom needs at least one ellipsoid")
    xs, ys, zs = grid_spec.axis_centers()
    z, y, x = np.meshgrid(zs, ys, xs, indexing="ij")
    acc = np.zeros(grid_spec.shape)
    for e in ellipsoids:
        dx = x - e.center[0]
        dy = y - e.center[1]
        dz = z - e.center[2]
        c, s = math.cos(e.angle), math.sin(e.angle)
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        inside = (lx / e.axes[0]) ** 2 + (ly / e.axes[1]) ** 2 + (dz / e.axes[2]) ** 2 <= 1.0
        acc[inside] += e.intensity
    np.clip(acc, 0.0, 1.0, out=acc)
    return VoxelGrid(grid_spec, acc)


def simulate_phantom(
    spec: Iterable | str, grid_spec: GridSpec, geom: ConeBeamGeometry, supersample: int = 2
) -> tuple[VoxelGrid, ProjectionStack]:
    """Ground truth on ``grid_spec`` and projections of the same phantom.

    The projections are taken from a rendering ``supersample`` times finer per
    axis, so the measured data are not an exact image of any volume on the
    reconstruction grid.
    """
    from .projector import forward_project

    truth = render_ellipsoid_phantom(spec, grid_spec)
    source = truth if supersample == 1 else render_ellipsoid_phantom(spec, grid_spec.refined(supersample))
    return truth, forward_project(source, geom)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _read_raw(path: Path, expected: int) -> np.ndarray:
    raw = np.fromfile(path, dtype=_LE_F32)
    if raw.size != expected or path.stat().st_size != expected * 4:
        raise ValueError(f"{path}: holds {path.stat().st_size} bytes, header implies {expected * 4}")
    return raw


def save_volume(grid: VoxelGrid, path) -> None:
    path = Path(path)
    grid.data.astype(_LE_F32).tofile(path)
    _sidecar(path).write_text(json.dumps(grid.spec.to_dict()))


def load_volume(path) -> VoxelGrid:
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    try:
        spec = GridSpec(tuple(meta["dims"]), tuple(meta["origin"]), tuple(meta["spacing"]))
    except KeyError as exc:
        raise ValueError(f"{side}: missing key {exc}") from None
    raw = _read_raw(path, spec.size)
    return VoxelGrid(spec, raw.astype(np.float64).reshape(spec.shape))


def save_projections(proj: ProjectionStack, path) -> None:
    path = Path(path)
    proj.data.astype(_LE_F32).tofile(path)
    g = proj.geometry
    meta = {
        "views": g.num_views,
        "rows": g.rows,
        "cols": g.cols,
        "angles": list(g.angles),
        "geometry": g.to_dict(),
    }
    _sidecar(path).write_text(json.dumps(meta))


def load_projections(path) -> ProjectionStack:
    path = Path(path)
    side = _sidecar(path)
    if not side.exists():
        raise FileNotFoundError(f"missing sidecar {side}")
    meta = json.loads(side.read_text())
    geom = ConeBeamGeometry.from_dict(meta["geometry"])
    if (meta["views"], meta["rows"], meta["cols"]) != geom.proj_shape:
        raise ValueError(f"{side}: header shape disagrees with its geometry block")
    raw = _read_raw(path, int(np.prod(geom.proj_shape)))
    return ProjectionStack(geom, raw.astype(np.float64).reshape(geom.proj_shape))


def export_slices(grid: VoxelGrid, dir_path, axis: str | int = "z") -> list[Path]:
    """Write one binary PGM (P5) per slice along ``axis``; [0, 1] maps to [0, 255]."""
    axes = {"z": 0, "y": 1, "x": 2}
    if isinstance(axis, str):
        if axis not in axes:
            raise ValueError(f"axis must be one of x, y, z; got {axis!r}")
        ax = axes[axis]
        name = axis
    else:
        if axis not in (0, 1, 2):
            raise ValueError(f"axis index must be 0, 1 or 2; got {axis}")
        # integer axes follow xyz order
        ax = 2 - axis
        name = "xyz"[axis]
    out_dir = Path(dir_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"cannot write to {out_dir}")
    img8 = np.rint(np.clip(grid.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    paths = []
    n = img8.shape[ax]
    width = len(str(n - 1))
    for i in range(n):
        sl = np.take(img8, i, axis=ax)
        p = out_dir / f"slice_{name}_{i:0{width}d}.pgm"
        h, w = sl.shape
        with open(p, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(sl).tobytes())
        paths.append(p)
    return paths


def read_pgm(path) -> np.ndarray:
    """Read a binary 8-bit PGM written by :func:`export_slices`."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
