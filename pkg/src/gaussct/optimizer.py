"""Projection-space L2 fitting of a Gaussian cloud, plus a voxel-grid baseline.

The objective is ``sum((A V - P)^2)`` over all detector elements, where ``V``
is the rasterized cloud (or the voxel grid itself for the baseline) and ``A``
the cone-beam projector. Parameters are updated with bias-corrected Adam.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import density_control as dc
from .gaussian_model import GaussianCloud, rasterize, rasterize_with_grads
from .geometry import GridSpec, ProjectionStack, VoxelGrid
from .metrics import psnr, ssim
from .projector import adjoint_array, forward_array

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Loss became non-finite."""


@dataclass
class OptimConfig:
    iterations: int = 3000
    beta1: float = 0.9
    beta2: float = 0.999
    lr_mu_start: float = 2e-4
    lr_mu_end: float = 2e-6
    lr_sigma_intensity: float = 0.05
    epsilon: float = 1e-15
    normalize_loss: bool = False
    eval_every: int = 50

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if min(self.lr_mu_start, self.lr_mu_end, self.lr_sigma_intensity) <= 0:
            raise ValueError("learning rates must be positive")
        if self.lr_mu_end > self.lr_mu_start:
            raise ValueError("lr_mu_end must not exceed lr_mu_start")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class VoxelIterConfig:
    iterations: int = 3000
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-15
    init: str = "zero"  # or "fbp"

    def __post_init__(self):
        if self.iterations < 0 or self.lr <= 0:
            raise ValueError("iterations must be >= 0 and lr positive")
        if self.init not in ("zero", "fbp"):
            raise ValueError(f"init must be 'zero' or 'fbp', got {self.init!r}")


def mu_lr_at(step: int, cfg: OptimConfig) -> float:
    """Exponential interpolation from ``lr_mu_start`` (step 0) to ``lr_mu_end`` (last step)."""
    if cfg.iterations == 0 or step <= 0:
        return cfg.lr_mu_start
    if step >= cfg.iterations:
        return cfg.lr_mu_end
    frac = step / cfg.iterations
    return cfg.lr_mu_start * (cfg.lr_mu_end / cfg.lr_mu_start) ** frac


def _loss_scale(measured: ProjectionStack, normalize: bool) -> float:
    return 1.0 / measured.data.size if normalize else 1.0


def projection_loss(volume: np.ndarray, spec: GridSpec, measured: ProjectionStack, normalize: bool = False):
    """``(loss, dL/dV)`` of the projection-space sum of squares for a voxel array."""
    resid = forward_array(volume, spec, measured.geometry) - measured.data
    scale = _loss_scale(measured, normalize)
    loss = scale * float(np.sum(resid * resid))
    adj = (2.0 * scale) * adjoint_array(resid, spec, measured.geometry)
    return loss, adj


def loss_and_voxel_adjoint(
    cloud: GaussianCloud,
    measured: ProjectionStack,
    grid_spec: GridSpec,
    normalize: bool = False,
) -> tuple[float, VoxelGrid, VoxelGrid]:
    """Rasterize, project and compare. Returns ``(loss, dL/dV, V)``."""
    vol = rasterize(cloud, grid_spec)
    loss, adj = projection_loss(vol.data, grid_spec, measured, normalize)
    return loss, VoxelGrid(grid_spec, adj), vol


def _adam(param, grad, m, v, lr, b1, b2, eps, t):
    """Bias-corrected Adam in place; ``t`` is a step count, scalar or broadcastable array."""
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def adam_step(cloud: GaussianCloud, grads, lrs, cfg: OptimConfig) -> None:
    """In-place Adam update of positions, log-radii and intensities.

    ``grads`` is ``(d_mu, d_sigma, d_intensity)``; the radius gradient is
    mapped to log-space as ``sigma * d_sigma``. ``lrs`` is
    ``(lr_mu, lr_log_sigma, lr_intensity)``. Bias correction uses each
    Gaussian's own step count, so Gaussians born with fresh moments take a
    first step of size ``lr`` like everyone else did.
    Intensities are clamped at zero and positions kept in the unit cube.
    """
    g_mu, g_sigma, g_int = grads
    n = len(cloud)
    if g_mu.shape != (n, 3) or g_sigma.shape != (n,) or g_int.shape != (n,):
        raise ValueError("gradient arrays are misaligned with the cloud")
    mom = cloud.moments
    if any(v.shape[0] != n for v in mom.values()):
        raise ValueError("Adam state is misaligned with the cloud")
    b1, b2, eps = cfg.beta1, cfg.beta2, cfg.epsilon
    mom["steps"] += 1
    t = mom["steps"]
    g_log_sigma = cloud.sigma * g_sigma
    _adam(cloud.mu, g_mu, mom["m_mu"], mom["v_mu"], lrs[0], b1, b2, eps, t[:, None])
    _adam(cloud.log_sigma, g_log_sigma, mom["m_s"], mom["v_s"], lrs[1], b1, b2, eps, t)
    _adam(cloud.intensity, g_int, mom["m_i"], mom["v_i"], lrs[2], b1, b2, eps, t)
    np.maximum(cloud.intensity, 0.0, out=cloud.intensity)
    np.clip(cloud.mu, 0.0, 1.0, out=cloud.mu)


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    events: list = field(default_factory=list)

    COLUMNS = ("iteration", "loss", "num_gaussians", "psnr", "ssim", "wall_ms", "cloned", "split", "pruned", "n_after")

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row.get(c, "")) for c in self.COLUMNS])


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x


def reconstruct_gaussian(
    measured: ProjectionStack,
    init: GaussianCloud,
    grid_spec: GridSpec,
    optim: OptimConfig | None = None,
    density: dc.DensityConfig | None = None,
    reference: VoxelGrid | None = None,
    seed: int = 0,
    check_invariants: bool = False,
    callback=None,
) -> tuple[GaussianCloud, VoxelGrid, TrainingLog]:
    """Fit ``init`` to ``measured``; returns the final cloud, its rasterization and the log.

    ``callback(step, cloud)`` is called after each step (checkpointing hook).
    """
    optim = optim or OptimConfig()
    density = density or dc.DensityConfig(enabled=False)
    rng = np.random.default_rng(seed)
    cloud = init.copy()
    cloud.reset_grad_stats()
    cloud.reset_moments()
    tlog = TrainingLog()
    t_start = time.perf_counter()
    for it in range(optim.iterations):
        loss, adj, vol = loss_and_voxel_adjoint(cloud, measured, grid_spec, optim.normalize_loss)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        grads = rasterize_with_grads(cloud, grid_spec, adj)
        cloud.grad_accum += np.linalg.norm(grads[0], axis=1)
        cloud.grad_vec += grads[0]
        cloud.grad_count += 1
        lrs = (mu_lr_at(it, optim), optim.lr_sigma_intensity, optim.lr_sigma_intensity)
        adam_step(cloud, grads, lrs, optim)

        row = {"iteration": it, "loss": loss, "num_gaussians": len(cloud)}
        if reference is not None:
            row["psnr"] = psnr(vol, reference)
            if it % optim.eval_every == 0:
                row["ssim"] = ssim(vol, reference)
        step = it + 1
        if density.is_event(step):
            cloud, rep = dc.densify_and_prune(cloud, density, rng)
            if check_invariants:
                dc.check_invariants(cloud, density)
            row.update(cloned=rep.cloned, split=rep.split, pruned=rep.pruned, n_after=rep.n_after)
            tlog.events.append((step, rep))
            if len(cloud) == 0:
                raise RuntimeError(f"density control removed every Gaussian at step {step}")
        row["wall_ms"] = round(1000.0 * (time.perf_counter() - t_start), 1)
        tlog.rows.append(row)
        if callback is not None:
            callback(step, cloud)
    final = rasterize(cloud, grid_spec)
    return cloud, final, tlog


def reconstruct_voxel_iterative(
    measured: ProjectionStack,
    grid_spec: GridSpec,
    cfg: VoxelIterConfig | None = None,
    init: VoxelGrid | None = None,
    reference: VoxelGrid | None = None,
) -> tuple[VoxelGrid, TrainingLog]:
    """Adam directly on voxel values of the same loss, clamped at zero after every step."""
    cfg = cfg or VoxelIterConfig()
    x = np.zeros(grid_spec.shape) if init is None else init.data.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    tlog = TrainingLog()
    t_start = time.perf_counter()
    for it in range(cfg.iterations):
        loss, grad = projection_loss(x, grid_spec, measured)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        _adam(x, grad, m, v, cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon, it + 1)
        np.maximum(x, 0.0, out=x)
        row = {"iteration": it, "loss": loss, "num_gaussians": 0}
        if reference is not None:
            row["psnr"] = psnr(x, reference)
        row["wall_ms"] = round(1000.0 * (time.perf_counter() - t_start), 1)
        tlog.rows.append(row)
    return VoxelGrid(grid_spec, x), tlog
