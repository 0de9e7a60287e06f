"""Deformable monocular tracking: LK flow, template meshes, joint pose and shape optimization."""

from .errors import ConfigError, DeftrackError, InsufficientDataError
from .geometry import CameraPose, Intrinsics
from .image import GrayImage, ImagePyramid
from .mesh import TemplateMesh
from .optimizer import OptimizationConfig, optimize_deformation
from .pipeline import RunConfig, RunResult, run_pipeline
from .synthetic import SyntheticSceneConfig, generate_synthetic_sequence

__all__ = [
    "CameraPose",
    "ConfigError",
    "DeftrackError",
    "GrayImage",
    "ImagePyramid",
    "InsufficientDataError",
    "Intrinsics",
    "OptimizationConfig",
    "RunConfig",
    "RunResult",
    "SyntheticSceneConfig",
    "TemplateMesh",
    "generate_synthetic_sequence",
    "optimize_deformation",
    "run_pipeline",
]
__version__ = "0.1.0"
