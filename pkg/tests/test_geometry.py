import math

import numpy as np
import pytest

from gaussct.geometry import (
    ConeBeamGeometry,
    GridSpec,
    ProjectionStack,
    VoxelGrid,
    make_semicircle_geometry,
)


def test_twenty_views_cover_half_open_semicircle():
    g = make_semicircle_geometry(20)
    expected = [k * math.pi / 20 for k in range(20)]
    assert g.angles == pytest.approx(expected, abs=0)
    assert g.angles[-1] == pytest.approx(19 * math.pi / 20)
    assert max(g.angles) < math.pi


@pytest.mark.parametrize(
    "n, expected",
    [(1, [0.0]), (4, [0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4])],
)
def test_semicircle_small_counts(n, expected):
    assert list(make_semicircle_geometry(n).angles) == pytest.approx(expected, rel=0, abs=1e-15)


def test_angle_spacing_uniform():
    d = np.diff(make_semicircle_geometry(37).angles)
    assert np.max(np.abs(d - math.pi / 37)) < 1e-15


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(source_distance=0.0),
        dict(detector_distance=-1.0),
        dict(pixel_size=(0.0, 0.1)),
        dict(pixel_size=(0.1, -0.1)),
    ],
)
def test_semicircle_rejects_nonpositive(kwargs):
    with pytest.raises(ValueError):
        make_semicircle_geometry(4, **kwargs)


def test_geometry_invariants_enforced():
    with pytest.raises(ValueError):
        ConeBeamGeometry(2.0, 2.0, (4, 4), (0.1, 0.1), (0.5, 0.2))  # not increasing
    with pytest.raises(ValueError):
        ConeBeamGeometry(2.0, 2.0, (4, 4), (0.1, 0.1), (0.0, 7.0))  # beyond 2 pi
    with pytest.raises(ValueError):
        ConeBeamGeometry(2.0, 2.0, (0, 4), (0.1, 0.1), (0.0,))


def test_frames_put_source_and_detector_opposite():
    g = make_semicircle_geometry(3, (5, 7), 2.0, 1.5, (0.1, 0.2))
    src, pix00, cstep, rstep = g.frames()
    iso = np.array(g.isocenter)
    center = pix00 + 3 * cstep + 2 * rstep
    assert np.linalg.norm(src - iso, axis=1) == pytest.approx([2.0] * 3)
    assert np.linalg.norm(center - iso, axis=1) == pytest.approx([1.5] * 3)
    # detector plane orthogonal to the central ray
    axis = src - center
    assert np.abs(np.sum(axis * cstep, axis=1)).max() < 1e-12
    assert np.abs(np.sum(axis * rstep, axis=1)).max() < 1e-12


def test_world_to_voxel_examples():
    spec = GridSpec((4, 5, 6), (0.1, 0.2, 0.05), (0.2, 0.15, 0.1))
    origin = np.array(spec.origin)
    assert spec.world_to_voxel(origin) == pytest.approx([0, 0, 0], abs=0)
    assert spec.world_to_voxel(origin + np.array(spec.spacing)) == pytest.approx([1, 1, 1], abs=1e-15)


def test_world_voxel_round_trip(rng):
    spec = GridSpec.unit_cube(7, 9, 5)
    p = rng.uniform(-0.5, 1.5, size=(100, 3))
    back = spec.voxel_to_world(spec.world_to_voxel(p))
    assert np.max(np.abs(back - p) / np.maximum(np.abs(p), 1e-300)) < 1e-12


def test_grid_rejects_bad_shapes():
    with pytest.raises(ValueError):
        GridSpec((0, 2, 2), (0.5, 0.5, 0.5), (0.1, 0.1, 0.1))
    with pytest.raises(ValueError):
        GridSpec((2, 2, 2), (0.5, 0.5, 0.5), (0.1, 0.0, 0.1))
    with pytest.raises(ValueError):
        GridSpec((4, 4, 4), (0.5, 0.5, 0.5), (0.25, 0.25, 0.25))  # leaves the unit cube


def test_unit_cube_layout_is_x_fastest():
    spec = GridSpec.unit_cube(4, 3, 2)
    assert spec.shape == (2, 3, 4)
    lo, hi = spec.bounds()
    assert lo == pytest.approx([0, 0, 0]) and hi == pytest.approx([1, 1, 1])
    flat = np.arange(24.0)
    grid = VoxelGrid(spec, flat)
    # x index advances first in the flat buffer
    assert grid.data[0, 0, 1] == 1.0 and grid.data[0, 1, 0] == 4.0 and grid.data[1, 0, 0] == 12.0


def test_voxel_grid_size_checked():
    with pytest.raises(ValueError):
        VoxelGrid(GridSpec.unit_cube(2), np.zeros(7))


def test_projection_stack_size_checked():
    g = make_semicircle_geometry(2, (3, 4))
    assert ProjectionStack(g, np.zeros(24)).data.shape == (2, 3, 4)
    with pytest.raises(ValueError):
        ProjectionStack(g, np.zeros(23))


def test_geometry_dict_round_trip():
    g = make_semicircle_geometry(5, (6, 8), 2.5, 1.5, (0.1, 0.2))
    assert ConeBeamGeometry.from_dict(g.to_dict()) == g


def test_refined_grid_keeps_bounds():
    spec = GridSpec((3, 4, 5), (0.1, 0.2, 0.05), (0.2, 0.15, 0.1))
    fine = spec.refined(3)
    assert fine.dims == (9, 12, 15)
    assert np.allclose(fine.bounds()[0], spec.bounds()[0]) and np.allclose(fine.bounds()[1], spec.bounds()[1])
    with pytest.raises(ValueError):
        spec.refined(0)
