"""Multi-scale training: loss, optimizer, densification and the fit loop.

Each iteration renders one (camera, scale) pair through selective
rendering, backpropagates the image loss to the 3D parameters, steps
Adam per parameter group, and refreshes coverage ranges. Coarse levels
are inserted exactly once when the warm-up ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Scene
from .eval import ssim_and_grad
from .lod_build import build_multiscale
from .pipeline import render_view_with_batch
from .projection import LowPassConfig, projection_backward
from .raster import rasterize_backward
from .select import SelectConfig, update_coverage_ranges

PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


@dataclass
class TrainConfig:
    iterations: int = 3000
    warmup_iters: int = 1000
    lr_position: float = 1.6e-4
    lr_position_final_ratio: float = 0.01   # exponential decay target
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    loss_lambda: float = 0.2
    densify_interval: int = 0               # 0 disables densification
    densify_grad_threshold: float = 1e-4
    densify_size_threshold: float = 0.0     # 0 -> 0.01 * bound_B
    densify_until: int = 0                  # 0 -> iterations // 2
    prune_opacity_threshold: float = 0.005
    scales: tuple = (1, 4, 16, 64)
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)
    optimize_groups: tuple = PARAM_GROUPS

    def __post_init__(self):
        if self.warmup_iters >= self.iterations:
            raise ValueError("warmup_iters must be < iterations")


def l1_and_grad(rendered, truth):
    diff = rendered - truth
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def loss(rendered, truth, lam=0.2):
    """(1 - lam) * L1 + lam * (1 - SSIM)."""
    v, _ = loss_and_grad(rendered, truth, lam, want_grad=False)
    return v


def loss_and_grad(rendered, truth, lam=0.2, want_grad=True):
    rendered = np.asarray(rendered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    l1, g1 = l1_and_grad(rendered, truth)
    s, gs = ssim_and_grad(rendered, truth, want_grad=want_grad)
    value = (1.0 - lam) * l1 + lam * (1.0 - s)
    if not want_grad:
        return value, None
    return value, (1.0 - lam) * g1 - lam * gs


class Adam:
    """Per-group Adam with explicit state surgery for scene mutations."""

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, params, grads, lrs):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= lrs[k] * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def remap(self, kept, n_new):
        """Keep moments of surviving rows, zero-init appended rows."""
        for state in (self.m, self.v):
            for k, arr in state.items():
                tail = np.zeros((n_new,) + arr.shape[1:])
                state[k] = np.concatenate([arr[kept], tail])


def _scene_params(scene: Scene):
    return {
        "positions": scene.positions,
        "rotations": scene.rotations,
        "log_scales": scene.log_scales,
        "opacity_logits": scene.opacity_logits,
        "sh_coeffs": scene.sh_coeffs,
    }


def scene_gradients(scene: Scene, batch, cam_s, image, image_grad, background):
    """Full-chain gradients of sum(image * image_grad) w.r.t. scene arrays."""
    rg = rasterize_backward(batch, cam_s, image, image_grad, background=background)
    pg = projection_backward(batch.cache, rg["color"], rg["opacity"],
                             rg["mean2d"], rg["cov2d"])
    grads = {k: np.zeros_like(v) for k, v in _scene_params(scene).items()}
    src = pg["source_index"]
    for k in PARAM_GROUPS:
        np.add.at(grads[k], src, pg[k])
    return grads


def densify_and_prune(scene: Scene, grad_norm, grad_dir, cfg: TrainConfig, rng):
    """Clone small / split large high-gradient Gaussians, prune transparent.

    grad_norm: (N,) averaged position-gradient magnitudes; grad_dir: (N,3)
    accumulated directions. Children inherit level and creation_scale.
    Returns (kept_indices, n_cloned, n_split) for optimizer-state surgery.
    """
    n = len(scene)
    size_thr = cfg.densify_size_threshold or 0.01 * scene.bound_B
    sizes = np.exp(scene.log_scales).max(axis=1)
    high = grad_norm >= cfg.densify_grad_threshold
    alive = scene.opacities >= cfg.prune_opacity_threshold
    clone = high & alive & (sizes <= size_thr)
    split = high & alive & (sizes > size_thr)
    kept = np.nonzero(alive & ~split)[0]

    pieces = [scene.subset(kept)]
    if np.any(clone):
        clones = scene.subset(clone)
        d = grad_dir[clone]
        nrm = np.linalg.norm(d, axis=1, keepdims=True)
        d = np.where(nrm > 0, d / np.where(nrm > 0, nrm, 1.0), 0.0)
        clones.positions = clones.positions + np.exp(clones.log_scales).mean(axis=1)[:, None] * d
        pieces.append(clones)
    if np.any(split):
        parents = scene.subset(split)
        from .core import quat_to_rotmat
        R = quat_to_rotmat(parents.rotations)
        s = np.exp(parents.log_scales)
        for _ in range(2):
            child = parents.subset(slice(None))
            z = rng.standard_normal((len(parents), 3))
            child.positions = parents.positions + np.einsum("nij,nj->ni", R * s[:, None, :], z)
            child.log_scales = parents.log_scales - np.log(1.6)
            pieces.append(child)

    out = pieces[0]
    for p in pieces[1:]:
        out.extend(p)
    for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs",
                 "levels", "creation_scales", "coverage_max", "coverage_min",
                 "coverage_initialized"):
        setattr(scene, name, getattr(out, name))
    return kept, int(np.sum(clone)), int(np.sum(split))


def _lrs(cfg: TrainConfig, it):
    decay = cfg.lr_position_final_ratio ** (it / cfg.iterations)
    return {
        "positions": cfg.lr_position * decay,
        "rotations": cfg.lr_rotation,
        "log_scales": cfg.lr_scale,
        "opacity_logits": cfg.lr_opacity,
        "sh_coeffs": cfg.lr_sh,
    }


def train(scene: Scene, dataset, cfg: TrainConfig,
          lp: LowPassConfig | None = None,
          select_cfg: SelectConfig | None = None):
    """Fit a scene to a dataset of (camera, {scale: image}) pairs.

    Returns (fitted scene copy, list of per-iteration log records).
    Deterministic given cfg.seed.
    """
    lp = lp or LowPassConfig()
    select_cfg = select_cfg or SelectConfig()
    scene = scene.copy()
    rng = np.random.default_rng(cfg.seed)
    adam = Adam({k: v.shape for k, v in _scene_params(scene).items()})
    bg = np.asarray(cfg.background, dtype=np.float64)

    grad_norm_acc = np.zeros(len(scene))
    grad_count = np.zeros(len(scene))
    grad_dir_acc = np.zeros((len(scene), 3))
    logs = []
    densify_until = cfg.densify_until or cfg.iterations // 2

    for it in range(1, cfg.iterations + 1):
        cam, images = dataset[rng.integers(len(dataset))]
        scale = int(cfg.scales[rng.integers(len(cfg.scales))])
        truth = images[scale]

        image, batch = render_view_with_batch(scene, cam, scale, mode="multi_scale",
                                              lp=lp, select_cfg=select_cfg, background=bg)
        value, dimg = loss_and_grad(image, truth, cfg.loss_lambda)
        if not np.isfinite(value):
            raise FloatingPointError(
                f"non-finite loss at iteration {it} (scale {scale}, cam {cam.cam_id}, "
                f"{len(batch)} splats)"
            )
        grads = scene_gradients(scene, batch, cam.at_scale(scale), image, dimg, bg)

        active = {k: grads[k] for k in cfg.optimize_groups}
        params = _scene_params(scene)
        adam.step(params, active, _lrs(cfg, it))
        scene.rotations /= np.linalg.norm(scene.rotations, axis=1, keepdims=True)

        src = batch.source_index
        gp = grads["positions"][src]
        grad_norm_acc[src] += np.linalg.norm(gp, axis=1)
        grad_dir_acc[src] += gp
        grad_count[src] += 1

        update_coverage_ranges(scene, batch, scale, cfg=select_cfg)

        inserted_count = 0
        if it == cfg.warmup_iters:
            inserted = build_multiscale(scene, [c for c, _ in dataset], lp=lp, cfg=select_cfg)
            inserted_count = sum(inserted.values())
            if inserted_count:
                adam.remap(np.arange(len(grad_norm_acc)), inserted_count)
                grad_norm_acc = np.concatenate([grad_norm_acc, np.zeros(inserted_count)])
                grad_count = np.concatenate([grad_count, np.zeros(inserted_count)])
                grad_dir_acc = np.concatenate([grad_dir_acc, np.zeros((inserted_count, 3))])

        if (cfg.densify_interval and it % cfg.densify_interval == 0
                and it <= densify_until):
            avg = grad_norm_acc / np.maximum(grad_count, 1.0)
            kept, n_clone, n_split = densify_and_prune(scene, avg, grad_dir_acc, cfg, rng)
            n_new = len(scene) - len(kept)
            adam.remap(kept, n_new)
            grad_norm_acc = np.zeros(len(scene))
            grad_count = np.zeros(len(scene))
            grad_dir_acc = np.zeros((len(scene), 3))

        logs.append({
            "iteration": it,
            "scale": scale,
            "loss": value,
            "gaussian_count": len(scene),
            "inserted_count": inserted_count,
        })
    return scene, logs


def full_gradient_check(scene: Scene, cam, scale=1, h=1e-5, seed=0,
                        lp: LowPassConfig | None = None, background=(0.0, 0.0, 0.0)):
    """Analytic vs central-finite-difference gradients per parameter group.

    The probe loss is a fixed random weighting of the rendered image.
    Returns {group: relative error}.
    """
    from .projection import project_scene
    from .raster import rasterize

    lp = lp or LowPassConfig()
    cam_s = cam.at_scale(scale)
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.1, 1.0, size=(cam_s.height, cam_s.width, 3))
    bg = np.asarray(background, dtype=np.float64)

    def forward(s):
        batch = project_scene(s, cam_s, lp, want_cache=True)
        image, _ = rasterize(batch, cam_s, background=bg)
        return image, batch

    image, batch = forward(scene)
    analytic = scene_gradients(scene, batch, cam_s, image, w, bg)

    errs = {}
    params = _scene_params(scene)
    for group, arr in params.items():
        fd = np.zeros_like(arr)
        flat = arr.reshape(-1)
        fd_flat = fd.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lo_hi = float(np.sum(forward(scene)[0] * w))
            flat[j] = orig - h
            lo_lo = float(np.sum(forward(scene)[0] * w))
            flat[j] = orig
            fd_flat[j] = (lo_hi - lo_lo) / (2 * h)
        denom = max(np.linalg.norm(fd), 1e-12)
        errs[group] = float(np.linalg.norm(analytic[group] - fd) / denom)
    return errs
