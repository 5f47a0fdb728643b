"""Perspective EWA splatting of 3D Gaussians to screen space.

Forward: project a scene through a pinhole camera, add the low-pass
dilation, measure pixel coverage and evaluate SH color per Gaussian.
Backward: analytic chain from screen-space gradients (mean2d, cov2d,
color, opacity) to the 3D parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Camera, Gaussian3D, Scene, Splat2D, quat_to_rotmat, sigmoid

NEAR_PLANE = 0.01
ALPHA_MIN = 1.0 / 255.0  # opacity threshold sigma_T for the coverage level set

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclass
class LowPassConfig:
    """Isotropic screen-space dilation added to every projected covariance."""

    dilation: float = 0.3  # pixels^2

    def __post_init__(self):
        if self.dilation < 0:
            raise ValueError("dilation must be >= 0")


def sh_basis(dirs, degree):
    """Real SH basis values, (N, (degree+1)^2), 3DGS sign convention."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    b = np.empty((n, (degree + 1) ** 2))
    b[:, 0] = SH_C0
    if degree >= 1:
        b[:, 1] = -SH_C1 * y
        b[:, 2] = SH_C1 * z
        b[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        b[:, 4] = SH_C2[0] * x * y
        b[:, 5] = SH_C2[1] * y * z
        b[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        b[:, 7] = SH_C2[3] * x * z
        b[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        b[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        b[:, 10] = SH_C3[1] * x * y * z
        b[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        b[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        b[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        b[:, 14] = SH_C3[5] * z * (xx - yy)
        b[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return b


def sh_basis_grad(dirs, degree):
    """d basis / d dir, shape (N, (degree+1)^2, 3), dir components unconstrained."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    g = np.zeros((n, (degree + 1) ** 2, 3))
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = SH_C2[2] * (-2 * x)
        g[:, 6, 1] = SH_C2[2] * (-2 * y)
        g[:, 6, 2] = SH_C2[2] * (4 * z)
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = SH_C2[4] * (2 * x)
        g[:, 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = SH_C3[0] * 6 * x * y
        g[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        g[:, 10, 0] = SH_C3[1] * y * z
        g[:, 10, 1] = SH_C3[1] * x * z
        g[:, 10, 2] = SH_C3[1] * x * y
        g[:, 11, 0] = SH_C3[2] * (-2 * x * y)
        g[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        g[:, 11, 2] = SH_C3[2] * (8 * y * z)
        g[:, 12, 0] = SH_C3[3] * (-6 * x * z)
        g[:, 12, 1] = SH_C3[3] * (-6 * y * z)
        g[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        g[:, 13, 1] = SH_C3[4] * (-2 * x * y)
        g[:, 13, 2] = SH_C3[4] * (8 * x * z)
        g[:, 14, 0] = SH_C3[5] * (2 * x * z)
        g[:, 14, 1] = SH_C3[5] * (-2 * y * z)
        g[:, 14, 2] = SH_C3[5] * (xx - yy)
        g[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
        g[:, 15, 1] = SH_C3[6] * (-6 * x * y)
    return g


def sh_eval(sh_coeffs, view_dir):
    """RGB in [0,1] from SH coefficients (3, m) and a unit view direction."""
    sh_coeffs = np.atleast_2d(np.asarray(sh_coeffs, dtype=np.float64))
    m = sh_coeffs.shape[1]
    degree = int(np.sqrt(m)) - 1
    b = sh_basis(np.asarray(view_dir, dtype=np.float64), degree)[0]
    return np.clip(0.5 + sh_coeffs @ b, 0.0, 1.0)


def pixel_coverage_values(cov2d_diag, opacity):
    """Coverage S_k: smaller axis extent of the sigma_T = 1/255 level set.

    The extent along axis a is the bounding-box width of the level-set
    ellipse, 2 * sqrt(2 * ln(255 * sigma) * V_aa); zero when the Gaussian
    never reaches 1/255 opacity. Measured on the pre-dilation covariance.
    """
    cov2d_diag = np.atleast_2d(np.asarray(cov2d_diag, dtype=np.float64))
    opacity = np.asarray(opacity, dtype=np.float64)
    s = np.zeros(cov2d_diag.shape[0])
    vis = opacity > ALPHA_MIN
    if np.any(vis):
        ln_term = np.log(255.0 * opacity[vis])
        vmin = np.clip(np.min(cov2d_diag[vis], axis=1), 0.0, None)
        s[vis] = 2.0 * np.sqrt(2.0 * ln_term * vmin)
    return s


def pixel_coverage(splat: Splat2D) -> float:
    diag = np.array([splat.cov2d[0, 0], splat.cov2d[1, 1]])
    return float(pixel_coverage_values(diag[None, :], np.array([splat.opacity]))[0])


@dataclass
class ProjectionCache:
    """Intermediates retained by project_scene for the analytic backward."""

    cam: Camera
    dilation: float
    kept: np.ndarray        # indices into the scene
    t: np.ndarray           # (M, 3) camera-space means
    d: np.ndarray           # (M,) depths (= -z_cam)
    J: np.ndarray           # (M, 2, 3) perspective Jacobians
    M3: np.ndarray          # (M, 3, 3) camera-space covariances
    R: np.ndarray           # (M, 3, 3) rotations from normalized quats
    s: np.ndarray           # (M, 3) exp(log_scale)
    q_raw: np.ndarray       # (M, 4) stored quaternions (pre-normalization)
    dirs: np.ndarray        # (M, 3) unit view directions
    dist: np.ndarray        # (M,) |p - cam center|
    sh: np.ndarray          # (M, 3, m)
    basis: np.ndarray       # (M, m)
    color_pre: np.ndarray   # (M, 3) pre-clip colors
    sigma: np.ndarray       # (M,) activated opacities
    sh_degree: int


@dataclass
class SplatBatch:
    """Projected splats for one camera, struct-of-arrays."""

    mean2d: np.ndarray        # (M, 2)
    cov2d: np.ndarray         # (M, 2, 2)
    cov2d_lp: np.ndarray      # (M, 2, 2)
    depth: np.ndarray         # (M,)
    color: np.ndarray         # (M, 3)
    opacity: np.ndarray       # (M,)
    coverage: np.ndarray      # (M,)
    source_index: np.ndarray  # (M,) int
    cache: ProjectionCache | None = field(default=None, repr=False)

    def __len__(self):
        return self.mean2d.shape[0]

    def subset(self, mask_or_idx) -> "SplatBatch":
        idx = np.arange(len(self))[mask_or_idx]
        cache = self.cache
        if cache is not None:
            cache = ProjectionCache(
                cam=cache.cam, dilation=cache.dilation, kept=cache.kept[idx],
                t=cache.t[idx], d=cache.d[idx], J=cache.J[idx], M3=cache.M3[idx],
                R=cache.R[idx], s=cache.s[idx], q_raw=cache.q_raw[idx],
                dirs=cache.dirs[idx], dist=cache.dist[idx], sh=cache.sh[idx],
                basis=cache.basis[idx], color_pre=cache.color_pre[idx],
                sigma=cache.sigma[idx], sh_degree=cache.sh_degree,
            )
        return SplatBatch(
            mean2d=self.mean2d[idx], cov2d=self.cov2d[idx], cov2d_lp=self.cov2d_lp[idx],
            depth=self.depth[idx], color=self.color[idx], opacity=self.opacity[idx],
            coverage=self.coverage[idx], source_index=self.source_index[idx],
            cache=cache,
        )

    def splat(self, i) -> Splat2D:
        return Splat2D(
            mean2d=self.mean2d[i].copy(), cov2d=self.cov2d[i].copy(),
            cov2d_lp=self.cov2d_lp[i].copy(), depth=float(self.depth[i]),
            color=self.color[i].copy(), opacity=float(self.opacity[i]),
            coverage=float(self.coverage[i]), source_index=int(self.source_index[i]),
        )

    def splats(self):
        return [self.splat(i) for i in range(len(self))]

    @classmethod
    def from_splats(cls, splats) -> "SplatBatch":
        if not splats:
            return cls(
                mean2d=np.zeros((0, 2)), cov2d=np.zeros((0, 2, 2)),
                cov2d_lp=np.zeros((0, 2, 2)), depth=np.zeros(0),
                color=np.zeros((0, 3)), opacity=np.zeros(0),
                coverage=np.zeros(0), source_index=np.zeros(0, dtype=np.int64),
            )
        return cls(
            mean2d=np.stack([s.mean2d for s in splats]).astype(np.float64),
            cov2d=np.stack([s.cov2d for s in splats]).astype(np.float64),
            cov2d_lp=np.stack([s.cov2d_lp for s in splats]).astype(np.float64),
            depth=np.array([s.depth for s in splats], dtype=np.float64),
            color=np.stack([s.color for s in splats]).astype(np.float64),
            opacity=np.array([s.opacity for s in splats], dtype=np.float64),
            coverage=np.array([s.coverage for s in splats], dtype=np.float64),
            source_index=np.array([s.source_index for s in splats], dtype=np.int64),
        )


def _jw_rows(Rwc, d, tx, ty, fx, fy):
    """J @ W as (N, 2, 3) without materializing the sparse J."""
    JW = np.empty((len(d), 2, 3))
    JW[:, 0, :] = (fx / d)[:, None] * Rwc[0] + (fx * tx / d ** 2)[:, None] * Rwc[2]
    JW[:, 1, :] = (fy / d)[:, None] * Rwc[1] + (fy * ty / d ** 2)[:, None] * Rwc[2]
    return JW


def project_coverage(scene: Scene, cam: Camera, indices=None):
    """Pixel coverage only, skipping color, dilation and frustum culling.

    Returns (indices of depth-visible Gaussians, their coverages). The
    selection pass needs nothing else, and coverage is independent of
    both the low-pass dilation and the image rectangle. Internals run
    in single precision: the values only feed thresholded predicates.
    """
    if indices is None:
        indices = np.arange(len(scene))
    else:
        indices = np.asarray(indices)
    p = scene.positions[indices].astype(np.float32)
    Rwc = cam.rotation.astype(np.float32)
    t = p @ Rwc.T + cam.translation.astype(np.float32)
    d = -t[:, 2]
    vis = d > NEAR_PLANE
    idx = indices[vis]
    t, d = t[vis], d[vis]
    fx, fy = np.float32(cam.fx), np.float32(cam.fy)
    JW = np.empty((len(d), 2, 3), dtype=np.float32)
    JW[:, 0, :] = (fx / d)[:, None] * Rwc[0] + (fx * t[:, 0] / d ** 2)[:, None] * Rwc[2]
    JW[:, 1, :] = (fy / d)[:, None] * Rwc[1] + (fy * t[:, 1] / d ** 2)[:, None] * Rwc[2]
    R = quat_to_rotmat(scene.rotations[idx]).astype(np.float32)
    Mfac = R * np.exp(scene.log_scales[idx]).astype(np.float32)[:, None, :]
    A = JW @ Mfac
    diag = np.einsum("nij,nij->ni", A, A).astype(np.float64)
    sigma = sigmoid(scene.opacity_logits[idx])
    return idx, pixel_coverage_values(diag, sigma)


def project_scene(scene: Scene, cam: Camera, lp: LowPassConfig,
                  indices=None, compute_color=True, want_cache=False) -> SplatBatch:
    """Project Gaussians to screen space; culled Gaussians are dropped.

    Culling: depth <= near plane, or the 3-sigma bounding box of the
    dilated footprint misses the image rectangle.
    """
    if indices is None:
        indices = np.arange(len(scene))
    else:
        indices = np.asarray(indices)
    p = scene.positions[indices]
    Rwc, tv = cam.rotation, cam.translation
    t = p @ Rwc.T + tv
    d = -t[:, 2]
    vis = d > NEAR_PLANE

    idx = indices[vis]
    t = t[vis]
    d = d[vis]

    tx, ty = t[:, 0], t[:, 1]
    fx, fy = cam.fx, cam.fy
    mean2d = np.stack([fx * tx / d + cam.cx, fy * ty / d + cam.cy], axis=1)

    R = quat_to_rotmat(scene.rotations[idx])
    s = np.exp(scene.log_scales[idx])
    Mfac = R * s[:, None, :]
    # cov2d = (J W Mfac)(J W Mfac)^T; J W built row-wise from J's sparsity
    JW = _jw_rows(Rwc, d, tx, ty, fx, fy)
    A = JW @ Mfac
    cov2d = A @ np.swapaxes(A, 1, 2)
    cov2d_lp = cov2d + lp.dilation * np.eye(2)

    # frustum cull on the 3-sigma (99% mass) bounding box of the dilated splat
    a, b, c = cov2d_lp[:, 0, 0], cov2d_lp[:, 0, 1], cov2d_lp[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.clip((0.5 * (a - c)) ** 2 + b ** 2, 0.0, None))
    r3 = 3.0 * np.sqrt(np.clip(lam_max, 0.0, None))
    inside = ((mean2d[:, 0] + r3 > 0) & (mean2d[:, 0] - r3 < cam.width)
              & (mean2d[:, 1] + r3 > 0) & (mean2d[:, 1] - r3 < cam.height))

    idx = idx[inside]
    t, d, mean2d = t[inside], d[inside], mean2d[inside]
    R, s, Mfac = R[inside], s[inside], Mfac[inside]
    cov2d, cov2d_lp = cov2d[inside], cov2d_lp[inside]

    sigma = sigmoid(scene.opacity_logits[idx])
    diag = cov2d[:, [0, 1], [0, 1]]
    coverage = pixel_coverage_values(diag, sigma)

    m = len(idx)
    cache = None
    if compute_color or want_cache:
        delta = scene.positions[idx] - cam.center
        dist = np.linalg.norm(delta, axis=1)
        dist = np.where(dist > 0, dist, 1.0)
        dirs = delta / dist[:, None]
        basis = sh_basis(dirs, scene.sh_degree) if m else np.zeros((0, (scene.sh_degree + 1) ** 2))
        sh = scene.sh_coeffs[idx]
        color_pre = 0.5 + np.einsum("ncm,nm->nc", sh, basis)
        color = np.clip(color_pre, 0.0, 1.0)
    else:
        color = np.full((m, 3), 0.5)
    if want_cache:
        # J and M3 are only needed by the backward pass
        tx, ty = t[:, 0], t[:, 1]
        J = np.zeros((len(d), 2, 3))
        J[:, 0, 0] = fx / d
        J[:, 0, 2] = fx * tx / d ** 2
        J[:, 1, 1] = fy / d
        J[:, 1, 2] = fy * ty / d ** 2
        Vhat = Mfac @ np.swapaxes(Mfac, 1, 2)
        M3 = (Rwc @ Vhat) @ Rwc.T
        cache = ProjectionCache(
            cam=cam, dilation=lp.dilation, kept=idx, t=t, d=d, J=J, M3=M3,
            R=R, s=s, q_raw=scene.rotations[idx], dirs=dirs, dist=dist,
            sh=sh, basis=basis, color_pre=color_pre, sigma=sigma,
            sh_degree=scene.sh_degree,
        )
    return SplatBatch(
        mean2d=mean2d, cov2d=cov2d, cov2d_lp=cov2d_lp, depth=d, color=color,
        opacity=sigma, coverage=coverage, source_index=idx, cache=cache,
    )


def project(g: Gaussian3D, cam: Camera, lp: LowPassConfig):
    """Project one Gaussian; returns None when culled."""
    scene = Scene.from_gaussians([g], sh_degree=int(np.sqrt(g.sh_coeffs.shape[1])) - 1)
    batch = project_scene(scene, cam, lp)
    if len(batch) == 0:
        return None
    return batch.splat(0)


def _rotmat_quat_jacobian(qn):
    """dR/dq at normalized quaternions, shape (N, 4, 3, 3)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    n = qn.shape[0]
    Jq = np.zeros((n, 4, 3, 3))
    zero = np.zeros(n)
    Jq[:, 0] = np.stack([
        np.stack([zero, -2 * z, 2 * y], axis=1),
        np.stack([2 * z, zero, -2 * x], axis=1),
        np.stack([-2 * y, 2 * x, zero], axis=1),
    ], axis=1)
    Jq[:, 1] = np.stack([
        np.stack([zero, 2 * y, 2 * z], axis=1),
        np.stack([2 * y, -4 * x, -2 * w], axis=1),
        np.stack([2 * z, 2 * w, -4 * x], axis=1),
    ], axis=1)
    Jq[:, 2] = np.stack([
        np.stack([-4 * y, 2 * x, 2 * w], axis=1),
        np.stack([2 * x, zero, 2 * z], axis=1),
        np.stack([-2 * w, 2 * z, -4 * y], axis=1),
    ], axis=1)
    Jq[:, 3] = np.stack([
        np.stack([-4 * z, -2 * w, 2 * x], axis=1),
        np.stack([2 * w, -4 * z, 2 * y], axis=1),
        np.stack([2 * x, 2 * y, zero], axis=1),
    ], axis=1)
    return Jq


def projection_backward(cache: ProjectionCache, g_color, g_opacity, g_mean2d, g_cov2d):
    """Chain screen-space splat gradients back to 3D Gaussian parameters.

    g_cov2d is the gradient w.r.t. the full symmetric 2x2 covariance
    (dilation shift has zero derivative). Returns per-splat gradients,
    aligned with cache.kept.
    """
    cam = cache.cam
    t, d, J, M3 = cache.t, cache.d, cache.J, cache.M3
    fx, fy = cam.fx, cam.fy
    tx, ty = t[:, 0], t[:, 1]
    m = t.shape[0]

    Gc = 0.5 * (g_cov2d + np.swapaxes(g_cov2d, 1, 2))

    # cov2d = J M3 J^T
    gM3 = np.einsum("nba,nbc,ncd->nad", J, Gc, J)
    gJ = 2.0 * np.einsum("nab,nbc,ncd->nad", Gc, J, M3)

    g_t = np.zeros((m, 3))
    g_t[:, 0] = g_mean2d[:, 0] * fx / d + gJ[:, 0, 2] * fx / d ** 2
    g_t[:, 1] = g_mean2d[:, 1] * fy / d + gJ[:, 1, 2] * fy / d ** 2
    g_t[:, 2] = (g_mean2d[:, 0] * fx * tx / d ** 2 + g_mean2d[:, 1] * fy * ty / d ** 2
                 + gJ[:, 0, 0] * fx / d ** 2 + gJ[:, 1, 1] * fy / d ** 2
                 + gJ[:, 0, 2] * 2 * fx * tx / d ** 3 + gJ[:, 1, 2] * 2 * fy * ty / d ** 3)

    # M3 = W Vhat W^T, Vhat = Mfac Mfac^T, Mfac = R diag(s)
    Rwc = cam.rotation
    gVhat = np.einsum("ba,nbc,cd->nad", Rwc, gM3, Rwc)
    gVhat = 0.5 * (gVhat + np.swapaxes(gVhat, 1, 2))
    Mfac = cache.R * cache.s[:, None, :]
    gMfac = 2.0 * gVhat @ Mfac
    g_s = np.einsum("nba,nbj->naj", cache.R, gMfac)[:, np.arange(3), np.arange(3)]
    g_log_scale = g_s * cache.s
    gR = gMfac * cache.s[:, None, :]

    qn = cache.q_raw / np.linalg.norm(cache.q_raw, axis=1, keepdims=True)
    Jq = _rotmat_quat_jacobian(qn)
    g_qn = np.einsum("nqab,nab->nq", Jq, gR)
    nrm = np.linalg.norm(cache.q_raw, axis=1)
    g_q = (g_qn - qn * np.sum(g_qn * qn, axis=1, keepdims=True)) / nrm[:, None]

    # color = clip(0.5 + sh . basis(dir))
    pass_mask = ((cache.color_pre > 0.0) & (cache.color_pre < 1.0)).astype(np.float64)
    gc = g_color * pass_mask
    g_sh = np.einsum("nc,nm->ncm", gc, cache.basis)
    bgrad = sh_basis_grad(cache.dirs, cache.sh_degree) if m else np.zeros((0, 1, 3))
    g_dir = np.einsum("nc,ncm,nmk->nk", gc, cache.sh, bgrad)
    # dir = delta / |delta|: project out the radial component
    g_p_dir = (g_dir - cache.dirs * np.sum(g_dir * cache.dirs, axis=1, keepdims=True)) \
        / cache.dist[:, None]

    g_position = g_t @ Rwc + g_p_dir
    g_opacity_logit = g_opacity * cache.sigma * (1.0 - cache.sigma)

    return {
        "positions": g_position,
        "rotations": g_q,
        "log_scales": g_log_scale,
        "opacity_logits": g_opacity_logit,
        "sh_coeffs": g_sh,
        "source_index": cache.kept,
    }
