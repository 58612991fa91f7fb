"""Clone, split and prune Gaussians from world-space position-gradient statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussian_model import Gaussian, GaussianCloud


@dataclass
class DensityConfig:
    enabled: bool = True
    start_iteration: int = 100
    interval: int = 100
    stop_iteration: int | None = None  # None: keep densifying to the end
    grad_threshold: float = 1e-5
    min_intensity: float = 0.001
    max_sigma: float | None = None  # None: twice the extent
    max_gaussians: int = 40_000
    split_sigma_factor: float = 1.6

    def __post_init__(self):
        if self.start_iteration < 0:
            raise ValueError("start_iteration must be >= 0")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.grad_threshold <= 0:
            raise ValueError("grad_threshold must be positive")
        if self.min_intensity <= 0:
            raise ValueError("min_intensity must be positive")
        if self.max_sigma is not None and self.max_sigma <= 0:
            raise ValueError("max_sigma must be positive")
        if self.max_gaussians < 1:
            raise ValueError("max_gaussians must be >= 1")
        if self.split_sigma_factor <= 1:
            raise ValueError("split_sigma_factor must exceed 1")

    def sigma_ceiling(self, extent: float) -> float:
        return self.max_sigma if self.max_sigma is not None else 2.0 * extent

    def is_event(self, step: int) -> bool:
        """True if density control runs after ``step`` (1-based) optimizer steps."""
        if not self.enabled or step <= 0 or step < self.start_iteration:
            return False
        if self.stop_iteration is not None and step > self.stop_iteration:
            return False
        return (step - self.start_iteration) % self.interval == 0


@dataclass
class DensityReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    n_after: int = 0


def clone_gaussian(g: Gaussian, grad_mu) -> tuple[Gaussian, Gaussian]:
    """Two half-intensity copies; the second is moved ``sigma / 2`` down the gradient."""
    grad_mu = np.asarray(grad_mu, dtype=np.float64)
    if not np.all(np.isfinite(grad_mu)):
        raise ValueError("gradient must be finite")
    norm = float(np.linalg.norm(grad_mu))
    mu = np.asarray(g.mu)
    moved = mu if norm == 0.0 else mu - 0.5 * g.sigma * grad_mu / norm
    half = 0.5 * g.intensity
    return Gaussian(g.mu, g.sigma, half), Gaussian(tuple(moved), g.sigma, half)


def split_gaussian(g: Gaussian, rng: np.random.Generator, factor: float = 1.6) -> tuple[Gaussian, Gaussian]:
    """Two children of radius ``sigma / factor`` placed by sampling the parent as a PDF."""
    pos = rng.normal(np.asarray(g.mu), g.sigma, size=(2, 3))
    np.clip(pos, 0.0, 1.0, out=pos)
    s = g.sigma / factor
    return Gaussian(tuple(pos[0]), s, g.intensity), Gaussian(tuple(pos[1]), s, g.intensity)


def densify_and_prune(cloud: GaussianCloud, cfg: DensityConfig, rng: np.random.Generator) -> tuple[GaussianCloud, DensityReport]:
    """One density-control event. Returns the new cloud and what changed.

    Gaussians whose mean position-gradient norm since the last event exceeds
    ``grad_threshold`` are cloned (sigma <= d/3) or split (sigma > d/3);
    candidates are taken in decreasing gradient order while the cap allows.
    Then every Gaussian below ``min_intensity`` or above the sigma ceiling is
    pruned. Clones inherit the parent's Adam moments; split children start
    from zero. Gradient statistics are reset afterwards.
    """
    n = len(cloud)
    d = cloud.extent
    sigma = cloud.sigma
    mean_grad = cloud.grad_accum / np.maximum(cloud.grad_count, 1)
    cand = np.flatnonzero(mean_grad > cfg.grad_threshold)
    # largest gradients first; ties broken by index for determinism
    cand = cand[np.lexsort((cand, -mean_grad[cand]))]
    room = max(cfg.max_gaussians - n, 0)
    cand = cand[:room]
    is_split = sigma[cand] > d / 3.0
    clone_idx = cand[~is_split]
    split_idx = cand[is_split]

    mu = cloud.mu.copy()
    inten = cloud.intensity.copy()
    mom = {k: v.copy() for k, v in cloud.moments.items()}

    # clones: parent row becomes copy A, copy B is appended
    if clone_idx.size:
        g = cloud.grad_vec[clone_idx]
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        unit = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
        clone_mu = np.clip(mu[clone_idx] - 0.5 * sigma[clone_idx, None] * unit, 0.0, 1.0)
        inten[clone_idx] *= 0.5
        clone_ls = cloud.log_sigma[clone_idx]
        clone_i = inten[clone_idx]
        clone_mom = {k: v[clone_idx] for k, v in mom.items()}
    else:
        clone_mu = np.zeros((0, 3))
        clone_ls = clone_i = np.zeros(0)
        clone_mom = {k: v[:0] for k, v in mom.items()}

    # splits: parent row replaced by child 1, child 2 appended
    if split_idx.size:
        pos = rng.normal(mu[split_idx, None, :], sigma[split_idx, None, None], size=(split_idx.size, 2, 3))
        np.clip(pos, 0.0, 1.0, out=pos)
        child_ls = cloud.log_sigma[split_idx] - np.log(cfg.split_sigma_factor)
        mu[split_idx] = pos[:, 0]
        log_sigma = cloud.log_sigma.copy()
        log_sigma[split_idx] = child_ls
        for v in mom.values():
            v[split_idx] = 0.0
        split_mu = pos[:, 1]
        split_ls = child_ls
        split_i = inten[split_idx]
        split_mom = {k: np.zeros_like(v[split_idx]) for k, v in mom.items()}
    else:
        log_sigma = cloud.log_sigma.copy()
        split_mu = np.zeros((0, 3))
        split_ls = split_i = np.zeros(0)
        split_mom = {k: v[:0] for k, v in mom.items()}

    grown = GaussianCloud(
        np.concatenate([mu, clone_mu, split_mu]),
        np.concatenate([log_sigma, clone_ls, split_ls]),
        np.concatenate([inten, clone_i, split_i]),
        d,
        moments={k: np.concatenate([mom[k], clone_mom[k], split_mom[k]]) for k in mom},
    )
    keep = (grown.intensity >= cfg.min_intensity) & (grown.sigma <= cfg.sigma_ceiling(d))
    out = grown.select(keep)
    out.reset_grad_stats()
    report = DensityReport(
        cloned=int(clone_idx.size),
        split=int(split_idx.size),
        pruned=int(len(grown) - len(out)),
        n_after=len(out),
    )
    return out, report


def check_invariants(cloud: GaussianCloud, cfg: DensityConfig) -> None:
    """Raise ``AssertionError`` if a post-event cloud breaks any bound."""
    cloud.check_aligned()
    if len(cloud) > cfg.max_gaussians:
        raise AssertionError(f"{len(cloud)} Gaussians exceed the cap {cfg.max_gaussians}")
    if len(cloud) and cloud.intensity.min() < cfg.min_intensity:
        raise AssertionError(f"intensity {cloud.intensity.min()} below {cfg.min_intensity}")
    if len(cloud) and cloud.sigma.max() > cfg.sigma_ceiling(cloud.extent):
        raise AssertionError(f"sigma {cloud.sigma.max()} above {cfg.sigma_ceiling(cloud.extent)}")
    if np.any(cloud.grad_accum != 0) or np.any(cloud.grad_count != 0):
        raise AssertionError("gradient statistics were not reset")
