import math

import numpy as np
import pytest

from gaussct.density_control import DensityConfig
from gaussct.gaussian_model import GaussianCloud, rasterize
from gaussct.geometry import ProjectionStack
from gaussct.optimizer import (
    DivergenceError,
    OptimConfig,
    VoxelIterConfig,
    adam_step,
    loss_and_voxel_adjoint,
    mu_lr_at,
    projection_loss,
    reconstruct_gaussian,
    reconstruct_voxel_iterative,
)
from gaussct.projector import forward_array


def test_mu_schedule_endpoints_and_midpoint():
    cfg = OptimConfig(iterations=3000)
    assert mu_lr_at(0, cfg) == 2e-4
    assert mu_lr_at(3000, cfg) == 2e-6
    assert mu_lr_at(1500, cfg) == pytest.approx(2e-5, rel=1e-12)


def test_mu_schedule_log_linear_and_decreasing():
    cfg = OptimConfig(iterations=1000)
    steps = np.arange(0, 1001)
    lr = np.array([mu_lr_at(int(s), cfg) for s in steps])
    assert np.all(np.diff(lr) < 0)
    expected = np.log(2e-4) + (steps / 1000) * (np.log(2e-6) - np.log(2e-4))
    assert np.max(np.abs(np.log(lr) - expected)) < 1e-12


def simple_cloud(rng, n=6, extent=0.2):
    return GaussianCloud.from_params(
        rng.uniform(0.35, 0.65, (n, 3)), rng.uniform(0.04, 0.06, n), rng.uniform(0.2, 0.6, n), extent
    )


def test_adam_zero_gradient_leaves_parameters(rng):
    cloud = simple_cloud(rng)
    before = cloud.copy()
    n = len(cloud)
    adam_step(cloud, (np.zeros((n, 3)), np.zeros(n), np.zeros(n)), (1e-3, 1e-2, 1e-2), OptimConfig())
    assert np.array_equal(cloud.mu, before.mu)
    assert np.array_equal(cloud.log_sigma, before.log_sigma)
    assert np.array_equal(cloud.intensity, before.intensity)


def test_adam_first_step_moves_by_lr(rng):
    cloud = simple_cloud(rng)
    before = cloud.copy()
    n = len(cloud)
    g_mu = rng.standard_normal((n, 3))
    g_s = rng.standard_normal(n)
    g_i = -np.abs(rng.standard_normal(n))  # intensity grows, so the clamp is inactive
    adam_step(cloud, (g_mu, g_s, g_i), (1e-3, 2e-2, 3e-2), OptimConfig())
    assert cloud.mu - before.mu == pytest.approx(-1e-3 * np.sign(g_mu), rel=1e-9)
    assert cloud.log_sigma - before.log_sigma == pytest.approx(-2e-2 * np.sign(g_s), rel=1e-9)
    assert cloud.intensity - before.intensity == pytest.approx(3e-2 * np.ones(n), rel=1e-9)


def test_newborn_rows_take_a_first_sized_step(rng):
    cloud = simple_cloud(rng, n=2)
    n = 2
    grads = (np.ones((n, 3)), np.ones(n), np.ones(n))
    for _ in range(5):
        adam_step(cloud, grads, (1e-3, 1e-2, 1e-2), OptimConfig())
    fresh = cloud.select([0, 1])
    for k in fresh.moments:
        fresh.moments[k][1] = 0
    before = fresh.mu.copy()
    adam_step(fresh, grads, (1e-3, 1e-2, 1e-2), OptimConfig())
    assert fresh.moments["steps"].tolist() == [6, 1]
    assert before[1] - fresh.mu[1] == pytest.approx([1e-3] * 3, rel=1e-9)


def test_adam_clamps_intensity_and_position(rng):
    cloud = GaussianCloud.from_params([[0.001, 0.5, 0.999]], [0.05], [0.01], 0.2)
    adam_step(cloud, (np.array([[1.0, 0.0, -1.0]]), np.zeros(1), np.ones(1)), (0.1, 0.1, 0.1), OptimConfig())
    assert cloud.intensity[0] == 0.0
    assert cloud.mu[0, 0] == 0.0 and cloud.mu[0, 2] == 1.0


def test_adam_rejects_misaligned_state(rng):
    cloud = simple_cloud(rng)
    cloud.moments["m_mu"] = cloud.moments["m_mu"][:-1]
    n = len(cloud)
    with pytest.raises(ValueError):
        adam_step(cloud, (np.zeros((n, 3)), np.zeros(n), np.zeros(n)), (1e-3, 1e-2, 1e-2), OptimConfig())


def test_loss_zero_when_measurement_is_own_projection(rng, small_grid, small_geom):
    cloud = simple_cloud(rng)
    vol = rasterize(cloud, small_grid)
    measured = ProjectionStack(small_geom, forward_array(vol.data, small_grid, small_geom))
    loss, adj, _ = loss_and_voxel_adjoint(cloud, measured, small_grid)
    assert loss == 0.0 and not adj.data.any()


def test_loss_against_zero_measurements(rng, small_grid, small_geom):
    cloud = simple_cloud(rng, n=1)
    measured = ProjectionStack(small_geom, np.zeros(small_geom.proj_shape))
    loss, _, vol = loss_and_voxel_adjoint(cloud, measured, small_grid)
    ax = forward_array(vol.data, small_grid, small_geom)
    assert loss > 0 and loss == pytest.approx(float(np.sum(ax * ax)), rel=1e-12)


def test_loss_matches_independent_recomputation(rng, small_grid, small_geom):
    from test_gaussian_model import brute_force

    cloud = simple_cloud(rng)
    measured = ProjectionStack(small_geom, rng.uniform(0, 0.3, small_geom.proj_shape))
    loss, _, _ = loss_and_voxel_adjoint(cloud, measured, small_grid)
    ref = forward_array(brute_force(cloud, small_grid, truncate=True), small_grid, small_geom) - measured.data
    assert loss == pytest.approx(float(np.sum(ref * ref)), rel=1e-6)


def test_normalized_loss_scales_by_element_count(rng, small_grid, small_geom):
    x = rng.random(small_grid.shape)
    measured = ProjectionStack(small_geom, rng.random(small_geom.proj_shape))
    raw, g_raw = projection_loss(x, small_grid, measured)
    norm, g_norm = projection_loss(x, small_grid, measured, normalize=True)
    m = measured.data.size
    assert norm == pytest.approx(raw / m, rel=1e-12)
    assert np.allclose(g_norm, g_raw / m, rtol=1e-12)


def test_loss_permutation_invariant(rng, small_grid, small_geom):
    cloud = simple_cloud(rng, n=20)
    measured = ProjectionStack(small_geom, rng.uniform(0, 0.3, small_geom.proj_shape))
    a, _, _ = loss_and_voxel_adjoint(cloud, measured, small_grid)
    b, _, _ = loss_and_voxel_adjoint(cloud.select(rng.permutation(20)), measured, small_grid)
    assert a == b


def test_zero_iterations_returns_init(rng, small_grid, small_geom):
    cloud = simple_cloud(rng)
    measured = ProjectionStack(small_geom, np.zeros(small_geom.proj_shape))
    out, vol, log = reconstruct_gaussian(measured, cloud, small_grid, OptimConfig(iterations=0))
    assert np.array_equal(out.mu, cloud.mu) and np.array_equal(out.intensity, cloud.intensity)
    assert np.array_equal(vol.data, rasterize(cloud, small_grid).data)
    assert log.rows == []


def test_gaussian_fit_reduces_loss_and_is_reproducible(rng, small_grid, small_geom):
    truth = simple_cloud(rng)
    measured = ProjectionStack(small_geom, forward_array(rasterize(truth, small_grid).data, small_grid, small_geom))
    init = truth.copy()
    init.intensity[:] = 0.1
    cfg = OptimConfig(iterations=40, lr_sigma_intensity=0.02)
    dens = DensityConfig(start_iteration=10, interval=10, grad_threshold=1e-3)
    a = reconstruct_gaussian(measured, init, small_grid, cfg, dens, seed=3, check_invariants=True)
    b = reconstruct_gaussian(measured, init, small_grid, cfg, dens, seed=3, check_invariants=True)
    assert a[2].rows[-1]["loss"] < 0.1 * a[2].rows[0]["loss"]
    assert np.array_equal(a[0].mu, b[0].mu) and np.array_equal(a[1].data, b[1].data)
    assert [r["loss"] for r in a[2].rows] == [r["loss"] for r in b[2].rows]


def test_divergence_detected(rng, small_grid, small_geom):
    cloud = simple_cloud(rng)
    measured = ProjectionStack(small_geom, np.full(small_geom.proj_shape, np.nan))
    with pytest.raises(DivergenceError):
        reconstruct_gaussian(measured, cloud, small_grid, OptimConfig(iterations=2))
    with pytest.raises(DivergenceError):
        reconstruct_voxel_iterative(measured, small_grid, VoxelIterConfig(iterations=2))


def test_voxel_baseline_zero_fixed_point(small_grid, small_geom):
    measured = ProjectionStack(small_geom, np.zeros(small_geom.proj_shape))
    vol, log = reconstruct_voxel_iterative(measured, small_grid, VoxelIterConfig(iterations=5))
    assert not vol.data.any()
    assert all(r["loss"] == 0.0 for r in log.rows)


def test_voxel_baseline_fits_consistent_data(rng, small_grid, small_geom):
    truth = rasterize(simple_cloud(rng), small_grid)
    measured = ProjectionStack(small_geom, forward_array(truth.data, small_grid, small_geom))
    vol, log = reconstruct_voxel_iterative(measured, small_grid, VoxelIterConfig(iterations=60, lr=0.01))
    assert log.rows[-1]["loss"] < 0.05 * log.rows[0]["loss"]
    assert vol.data.min() >= 0.0


def test_training_log_csv(tmp_path, rng, small_grid, small_geom):
    cloud = simple_cloud(rng)
    measured = ProjectionStack(small_geom, np.zeros(small_geom.proj_shape))
    _, _, log = reconstruct_gaussian(measured, cloud, small_grid, OptimConfig(iterations=3))
    log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0].split(",")[:6] == ["iteration", "loss", "num_gaussians", "psnr", "ssim", "wall_ms"]
    assert len(lines) == 4


@pytest.mark.parametrize(
    "kwargs",
    [dict(iterations=-1), dict(beta1=1.0), dict(lr_mu_start=0.0), dict(lr_mu_end=1e-3), dict(epsilon=0.0)],
)
def test_optim_config_validation(kwargs):
    with pytest.raises(ValueError):
        OptimConfig(**kwargs)


def test_voxel_config_validation():
    with pytest.raises(ValueError):
        VoxelIterConfig(init="ones")
    assert math.isfinite(VoxelIterConfig().lr)
