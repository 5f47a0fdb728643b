"""Aggregation of small fine-level Gaussians into coarse-level ones.

Per coarse level l_m: measure each finer Gaussian's minimum pixel
coverage over all training cameras at the 4^(l_m-1)-times downsampled
resolution, bin the sub-threshold ones on a (400/l_m)^3 voxel grid over
normalized space, average-pool each voxel into one Gaussian and enlarge
it so its coverage lands near the threshold.
"""

from __future__ import annotations

import numpy as np

from .core import Scene, logit, sigmoid
from .projection import LowPassConfig, project_scene
from .select import SelectConfig

VOXEL_BASE = 400


def voxel_resolution(l_m):
    return VOXEL_BASE // l_m


def normalize_position(x, B):
    """Map world coordinates to (-2, 2)^3, per component.

    Inside [-B, B] the map is linear (x/B); outside it compresses to
    sign(x) * (2 - B/|x|). Continuous at |x| = B.
    """
    x = np.asarray(x, dtype=np.float64)
    if B <= 0:
        raise ValueError("B must be positive")
    inner = np.abs(x) <= B
    out = np.where(inner, x / B, np.sign(x) * (2.0 - B / np.where(inner, 1.0, np.abs(x))))
    return out


def voxel_keys(positions, B, l_m):
    """Integer voxel ijk per position, grid covering the [-2, 2] cube."""
    r = voxel_resolution(l_m)
    xn = normalize_position(positions, B)
    ijk = np.floor((xn + 2.0) / 4.0 * r).astype(np.int64)
    return np.clip(ijk, 0, r - 1)


def min_coverage(scene: Scene, cameras, levels_used, scale,
                 lp: LowPassConfig | None = None):
    """Minimum pixel coverage per Gaussian over all cameras at `scale`.

    Only Gaussians with level in `levels_used` (inclusive range tuple)
    get a finite value; Gaussians culled in every camera get +inf.
    Returns (coverages, indices into the scene).
    """
    lp = lp or LowPassConfig()
    lo, hi = levels_used
    idx = np.nonzero((scene.levels >= lo) & (scene.levels <= hi))[0]
    if len(idx) == 0 or not cameras:
        return np.zeros(0), idx
    cov = np.full(len(scene), np.inf)
    for cam in cameras:
        batch = project_scene(scene, cam.at_scale(scale), lp,
                              indices=idx, compute_color=False)
        np.minimum.at(cov, batch.source_index, batch.coverage)
    return cov[idx], idx


def _mean_quaternion(quats):
    """Normalized arithmetic mean after canonical sign alignment.

    Signs are aligned by flipping each quaternion so its first nonzero
    component is positive, which keeps the result independent of member
    order (q and -q describe the same rotation).
    """
    q = np.array(quats, dtype=np.float64)
    lead = q[np.arange(len(q)), np.argmax(np.abs(q) > 1e-12, axis=1)]
    q = q * np.where(lead < 0, -1.0, 1.0)[:, None]
    mean = q.mean(axis=0)
    n = np.linalg.norm(mean)
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    return mean / n


def aggregate_level(scene: Scene, cameras, l_m,
                    lp: LowPassConfig | None = None,
                    cfg: SelectConfig | None = None) -> Scene:
    """One Alg.-1 step: aggregate sub-threshold Gaussians into level l_m."""
    if not (2 <= l_m <= scene.l_max):
        raise ValueError(f"l_m must lie in [2, l_max], got {l_m}")
    cfg = cfg or SelectConfig()
    scale = 4 ** (l_m - 1)
    cov, idx = min_coverage(scene, cameras, (1, l_m - 1), scale, lp=lp)
    small = cov < cfg.s_t
    members = idx[small]
    out = Scene.empty(sh_degree=scene.sh_degree, l_max=scene.l_max, bound_B=scene.bound_B)
    out.train_scale_min = scene.train_scale_min
    out.train_scale_max = scene.train_scale_max
    if len(members) == 0:
        return out
    member_cov = cov[small]

    keys = voxel_keys(scene.positions[members], scene.bound_B, l_m)
    r = voxel_resolution(l_m)
    flat = (keys[:, 0] * r + keys[:, 1]) * r + keys[:, 2]
    order = np.argsort(flat, kind="stable")
    flat, members, member_cov = flat[order], members[order], member_cov[order]
    starts = np.nonzero(np.r_[True, np.diff(flat) != 0])[0]
    ends = np.r_[starts[1:], len(flat)]

    n_vox = len(starts)
    positions = np.empty((n_vox, 3))
    rotations = np.empty((n_vox, 4))
    log_scales = np.empty((n_vox, 3))
    opacity_logits = np.empty(n_vox)
    sh = np.empty((n_vox, 3, scene.sh_coeffs.shape[2]))
    for v, (s0, s1) in enumerate(zip(starts, ends)):
        grp = members[s0:s1]
        positions[v] = scene.positions[grp].mean(axis=0)
        rotations[v] = _mean_quaternion(scene.rotations[grp])
        sh[v] = scene.sh_coeffs[grp].mean(axis=0)
        # opacity pooled in activated space, scale pooled in log space
        op = sigmoid(scene.opacity_logits[grp]).mean()
        opacity_logits[v] = logit(np.clip(op, 1e-9, 1 - 1e-9))
        s_avg = max(member_cov[s0:s1].mean(), 1e-6)
        log_scales[v] = scene.log_scales[grp].mean(axis=0) + np.log(cfg.s_t / s_avg)

    out.positions = positions
    out.rotations = rotations
    out.log_scales = log_scales
    out.opacity_logits = opacity_logits
    out.sh_coeffs = sh
    out.levels = np.full(n_vox, l_m, dtype=np.int64)
    out.creation_scales = np.full(n_vox, scale, dtype=np.int64)
    out.coverage_max = np.full(n_vox, np.nan)
    out.coverage_min = np.full(n_vox, np.nan)
    out.coverage_initialized = np.zeros(n_vox, dtype=bool)
    return out


def build_multiscale(scene: Scene, cameras, lp: LowPassConfig | None = None,
                     cfg: SelectConfig | None = None):
    """Insert levels 2..l_max in place, ascending so each sees the last.

    Returns {level: inserted count}.
    """
    inserted = {}
    for l_m in range(2, scene.l_max + 1):
        new = aggregate_level(scene, cameras, l_m, lp=lp, cfg=cfg)
        inserted[l_m] = len(new)
        if len(new):
            scene.extend(new)
    return inserted


def bound_from_cameras(cameras, min_bound=1.0):
    """Half side of the tightest axis-aligned cube holding all camera centers."""
    centers = np.stack([c.center for c in cameras])
    span = centers.max(axis=0) - centers.min(axis=0)
    return max(float(span.max()) / 2.0, min_bound)
