"""Coverage-range maintenance and the selective rendering predicate.

A Gaussian is kept for rendering when its current pixel coverage S sits
inside the relative band of its tracked [S_min, S_max] range, with the
absolute S_T floor preserving large low-level Gaussians. Ranges decay
multiplicatively toward freshly observed coverages at the Gaussian's
creation scale.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import Camera, RenderStats, Scene
from .projection import (LowPassConfig, SplatBatch, project_coverage,
                         project_scene)


@dataclass
class SelectConfig:
    s_rel_max: float = 1.5
    s_rel_min: float = 0.5
    s_t: float = 2.0        # pixels
    lambda1: float = 0.95
    lambda2: float = 1.05

    def __post_init__(self):
        if not (self.s_rel_max > 1 > self.s_rel_min > 0):
            raise ValueError("need s_rel_max > 1 > s_rel_min > 0")
        if not (0 < self.lambda1 < 1 < self.lambda2):
            raise ValueError("need 0 < lambda1 < 1 < lambda2")


def selection_mask(coverage, cov_max, cov_min, initialized, levels, render_scale,
                   scene: Scene, cfg: SelectConfig):
    """Vectorized keep/drop predicate over projected Gaussians."""
    keep_max = coverage <= cfg.s_rel_max * cov_max
    keep_min = (coverage >= cfg.s_rel_min * cov_min) | (coverage >= cfg.s_t)
    # finest/coarsest levels render beyond the training resolution range
    if render_scale < scene.train_scale_min:
        keep_max |= levels == 1
    if render_scale > scene.train_scale_max:
        keep_min |= levels == scene.l_max
    return ~initialized | (keep_max & keep_min)


def select_for_render(scene: Scene, cam: Camera, render_scale,
                      cfg: SelectConfig | None = None,
                      lp: LowPassConfig | None = None,
                      want_cache=False):
    """Project all Gaussians, then filter by the coverage predicate.

    Coverage is only known post-splat, so the whole scene is projected
    every render. Returns (selected SplatBatch, RenderStats fragment).
    """
    if render_scale < 1:
        raise ValueError("render_scale must be >= 1")
    cfg = cfg or SelectConfig()
    lp = lp or LowPassConfig()
    t0 = time.perf_counter()
    src, coverage = project_coverage(scene, cam.at_scale(render_scale))
    keep = selection_mask(
        coverage, scene.coverage_max[src], scene.coverage_min[src],
        scene.coverage_initialized[src], scene.levels[src], render_scale, scene, cfg,
    )
    # full projection (color, backward cache) only for the surviving subset
    colored = project_scene(scene, cam.at_scale(render_scale), lp,
                            indices=src[keep], want_cache=want_cache)
    stats = RenderStats(
        wall_time=time.perf_counter() - t0,
        num_selected=len(colored), num_splatted=len(src), scene_size=len(scene),
    )
    return colored, stats


def update_coverage_ranges(scene: Scene, splats: SplatBatch, render_scale,
                           cfg: SelectConfig | None = None):
    """Decayed min/max range update for splats rendered at their creation scale."""
    cfg = cfg or SelectConfig()
    src = splats.source_index
    # zero coverage (opacity under 1/255) carries no level-set extent signal
    match = (scene.creation_scales[src] == render_scale) & (splats.coverage > 0)
    if not np.any(match):
        return 0
    idx = src[match]
    s_k = splats.coverage[match]
    init = scene.coverage_initialized[idx]

    first = idx[~init]
    scene.coverage_max[first] = s_k[~init]
    scene.coverage_min[first] = s_k[~init]
    scene.coverage_initialized[first] = True

    upd = idx[init]
    scene.coverage_max[upd] = np.maximum(cfg.lambda1 * scene.coverage_max[upd], s_k[init])
    scene.coverage_min[upd] = np.minimum(cfg.lambda2 * scene.coverage_min[upd], s_k[init])

    bad = scene.coverage_min[idx] > scene.coverage_max[idx]
    if np.any(bad):
        raise AssertionError("coverage range inverted after update")
    return int(len(idx))
