"""Sparse-view cone-beam CT reconstruction with isotropic 3D Gaussians."""

from .density_control import DensityConfig, densify_and_prune
from .gaussian_model import Gaussian, GaussianCloud, rasterize, rasterize_with_grads
from .geometry import ConeBeamGeometry, GridSpec, ProjectionStack, VoxelGrid, make_semicircle_geometry
from .initializer import InitConfig, init_from_fbp, init_uniform
from .metrics import psnr, ssim
from .optimizer import OptimConfig, VoxelIterConfig, reconstruct_gaussian, reconstruct_voxel_iterative
from .projector import RampFilter, back_project, fbp_reconstruct, forward_project

__version__ = "0.1.0"

__all__ = [
    "ConeBeamGeometry",
    "DensityConfig",
    "Gaussian",
    "GaussianCloud",
    "GridSpec",
    "InitConfig",
    "OptimConfig",
    "ProjectionStack",
    "RampFilter",
    "VoxelGrid",
    "VoxelIterConfig",
    "back_project",
    "densify_and_prune",
    "fbp_reconstruct",
    "forward_project",
    "init_from_fbp",
    "init_uniform",
    "make_semicircle_geometry",
    "psnr",
    "rasterize",
    "rasterize_with_grads",
    "reconstruct_gaussian",
    "reconstruct_voxel_iterative",
    "ssim",
]
