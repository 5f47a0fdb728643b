"""Multi-scale 3D Gaussian splatting: CPU renderer, LOD builder, fit loop."""

from .core import Camera, Gaussian3D, RenderStats, Scene, Splat2D
from .projection import LowPassConfig, pixel_coverage, project, project_scene
from .raster import rasterize, rasterize_naive
from .select import SelectConfig, select_for_render, update_coverage_ranges
from .lod_build import aggregate_level, build_multiscale
from .optim import TrainConfig, loss, train
from .eval import bench, psnr, ssim
from .pipeline import render_view

__all__ = [
    "Camera", "Gaussian3D", "RenderStats", "Scene", "Splat2D",
    "LowPassConfig", "pixel_coverage", "project", "project_scene",
    "rasterize", "rasterize_naive",
    "SelectConfig", "select_for_render", "update_coverage_ranges",
    "aggregate_level", "build_multiscale",
    "TrainConfig", "loss", "train",
    "bench", "psnr", "ssim", "render_view",
]

__version__ = "0.1.0"
