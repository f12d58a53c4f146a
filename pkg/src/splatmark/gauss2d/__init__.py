"""2D Gaussian splatting: scenes, patch rasterization, fitting and perturbation."""
from .fit import Adam, FittingError, OptimizerConfig, fit
from .raster import (
    DEFAULT_CUTOFF,
    GradientSet,
    LossSpec,
    PatchLayout,
    axis_blend_weights,
    coverage,
    rasterize,
    rasterize_global,
    rasterize_with_grads,
)
from .scene import GaussianScene, init_scene, load_scene, perturb_means, save_scene

__all__ = [
    "Adam",
    "DEFAULT_CUTOFF",
    "FittingError",
    "GaussianScene",
    "GradientSet",
    "LossSpec",
    "OptimizerConfig",
    "PatchLayout",
    "axis_blend_weights",
    "coverage",
    "fit",
    "init_scene",
    "load_scene",
    "perturb_means",
    "rasterize",
    "rasterize_global",
    "rasterize_with_grads",
    "save_scene",
]
