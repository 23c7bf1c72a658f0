"""Expression-controlled 3D Gaussian splat avatars with a toy diffusion prior."""
from __future__ import annotations

from .errors import (CheckpointError, ConfigError, MeshError, NumericError, ObjParseError, PlyError,
                     ShapeMismatchError, SplatExprError)
from .scene import Camera, GaussianScene, Splat, TemplateMesh, init_scene, load_ply, save_ply
from .rasterizer import render, render_backward
from .trainer import TrainConfig, fit, resume

__version__ = "0.1.0"

__all__ = [
    "Camera", "CheckpointError", "ConfigError", "GaussianScene", "MeshError", "NumericError", "ObjParseError",
    "PlyError", "ShapeMismatchError", "Splat", "SplatExprError", "TemplateMesh", "TrainConfig", "fit",
    "init_scene", "load_ply", "render", "render_backward", "resume", "save_ply",
]
