"""Differentiable MPM simulation fused with differentiable voxel volume
rendering, plus a staged pipeline recovering geometry, initial velocity and
material parameters from posed multi-view video."""

__version__ = "0.1.0"

from . import errors
from .materials import (
    Elastic,
    NewtonianFluid,
    NonNewtonianFluid,
    Plasticine,
    Sand,
    lame_from_young_poisson,
)
from .mpm_core import Cylinder, HalfSpace, MpmGrid, ParticleState
from .radiance_field import ColorNet, VoxelField
from .renderer import Camera, Ray
from .scene_io import SceneConfig

__all__ = [
    "errors",
    "Elastic",
    "Plasticine",
    "NewtonianFluid",
    "NonNewtonianFluid",
    "Sand",
    "lame_from_young_poisson",
    "MpmGrid",
    "ParticleState",
    "HalfSpace",
    "Cylinder",
    "VoxelField",
    "ColorNet",
    "Camera",
    "Ray",
    "SceneConfig",
]
