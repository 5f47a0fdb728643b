"""Shared render entry point: selection mode wiring plus stats bookkeeping."""

from __future__ import annotations

import time

import numpy as np

from .core import Camera, RenderStats, Scene
from .projection import LowPassConfig, project_scene
from .raster import rasterize
from .select import SelectConfig, select_for_render

# single_scale renders all level-1 Gaussians without any selection (the
# plain-splatting baseline); filter_small additionally drops sub-threshold
# splats without having coarse replacements (the naive-filtering ablation).
BENCH_MODES = ("multi_scale", "single_scale", "filter_small")


def render_view(scene: Scene, cam: Camera, scale, mode="multi_scale",
                lp: LowPassConfig | None = None,
                select_cfg: SelectConfig | None = None,
                background=(0.0, 0.0, 0.0), want_cache=False):
    """Render one camera at a downsample scale; returns (image, RenderStats)."""
    lp = lp or LowPassConfig()
    select_cfg = select_cfg or SelectConfig()
    cam_s = cam.at_scale(scale)
    t0 = time.perf_counter()
    if mode == "multi_scale":
        batch, stats = select_for_render(scene, cam, scale, cfg=select_cfg, lp=lp,
                                         want_cache=want_cache)
        num_splatted = stats.num_splatted
    elif mode in ("single_scale", "filter_small"):
        idx = np.nonzero(scene.levels == 1)[0]
        batch = project_scene(scene, cam_s, lp, indices=idx, want_cache=want_cache)
        num_splatted = len(batch)
        if mode == "filter_small":
            batch = batch.subset(batch.coverage >= select_cfg.s_t)
    else:
        raise ValueError(f"unknown render mode {mode!r}")
    image, rstats = rasterize(batch, cam_s, background=background)
    stats = RenderStats(
        wall_time=time.perf_counter() - t0,
        num_selected=len(batch),
        num_splatted=num_splatted,
        scene_size=len(scene),
        blends_per_pixel=rstats.blends_per_pixel,
    )
    stats.validate()
    return image, stats


def render_view_with_batch(scene, cam, scale, mode="multi_scale", lp=None,
                           select_cfg=None, background=(0.0, 0.0, 0.0)):
    """render_view variant that also hands back the splat batch (training path)."""
    lp = lp or LowPassConfig()
    select_cfg = select_cfg or SelectConfig()
    cam_s = cam.at_scale(scale)
    if mode == "multi_scale":
        batch, stats = select_for_render(scene, cam, scale, cfg=select_cfg, lp=lp,
                                         want_cache=True)
    else:
        idx = np.nonzero(scene.levels == 1)[0]
        batch = project_scene(scene, cam_s, lp, indices=idx, want_cache=True)
    image, _ = rasterize(batch, cam_s, background=background)
    return image, batch
