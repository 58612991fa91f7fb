"""PSNR and slice-wise SSIM for volumes normalized to [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import VoxelGrid

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1 = 0.01
K2 = 0.03


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    per_slice: list | None = None


def _arrays(a, b):
    a = a.data if isinstance(a, VoxelGrid) else np.asarray(a, dtype=np.float64)
    b = b.data if isinstance(b, VoxelGrid) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, data_range: float = 1.0) -> float:
    """``10 log10(range^2 / MSE)``; ``inf`` for identical inputs."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    a, b = _arrays(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _ssim_maps(a, b, data_range):
    # 11x11 Gaussian window (sigma 1.5) in-plane only
    truncate = (SSIM_WINDOW // 2) / SSIM_SIGMA
    sig = (0.0, SSIM_SIGMA, SSIM_SIGMA)

    def blur(x):
        return gaussian_filter(x, sigma=sig, truncate=truncate, mode="reflect")

    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim_slices(a, b, data_range: float = 1.0) -> np.ndarray:
    """Mean SSIM of every z-slice, skipping window-half borders in-plane."""
    a, b = _arrays(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"in-plane size {a.shape[-2:]} is smaller than the {SSIM_WINDOW}-pixel window")
    smap = _ssim_maps(a, b, data_range)
    pad = SSIM_WINDOW // 2
    inner = smap[:, pad:-pad, pad:-pad]
    return inner.mean(axis=(1, 2))


def ssim(a, b, data_range: float = 1.0) -> float:
    return float(np.mean(ssim_slices(a, b, data_range)))


def evaluate(recon, reference, data_range: float = 1.0, per_slice: bool = False) -> MetricReport:
    rep = MetricReport(psnr(recon, reference, data_range), ssim(recon, reference, data_range))
    if per_slice:
        a, b = _arrays(recon, reference)
        s = ssim_slices(a, b, data_range)
        rep.per_slice = [(psnr(a[k], b[k], data_range), float(s[k])) for k in range(a.shape[0])]
    return rep
