"""Domain types: Gaussians, scenes, cameras, splats, render statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_NORM_TOL = 1e-6
ROT_ORTHO_TOL = 1e-6


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q):
    """Unit quaternions (..., 4) wxyz -> rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def sh_dim(degree):
    return (degree + 1) ** 2


@dataclass
class Gaussian3D:
    """One anisotropic 3D Gaussian with appearance and LOD state.

    Opacity and scale are stored pre-activation (logit / log) so the
    optimizer can step them unconstrained.
    """

    position: np.ndarray          # (3,) world
    rotation: np.ndarray          # (4,) unit quaternion wxyz
    log_scale: np.ndarray         # (3,) log stddev per axis
    opacity_logit: float
    sh_coeffs: np.ndarray         # (3, (D+1)^2)
    level: int = 1
    creation_scale: int = 1
    coverage_max: float = np.nan
    coverage_min: float = np.nan
    coverage_initialized: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.sh_coeffs = np.atleast_2d(np.asarray(self.sh_coeffs, dtype=np.float64))
        self.validate()

    def validate(self):
        n = np.linalg.norm(self.rotation)
        if abs(n - 1.0) > QUAT_NORM_TOL:
            raise ValueError(f"rotation quaternion norm {n} not unit within {QUAT_NORM_TOL}")
        if not np.isfinite(self.opacity_logit):
            raise ValueError("opacity logit must be finite")
        if self.level < 1:
            raise ValueError(f"level {self.level} < 1")
        if self.creation_scale != 4 ** (self.level - 1):
            raise ValueError(
                f"creation_scale {self.creation_scale} != 4^(level-1) for level {self.level}"
            )
        if self.coverage_initialized:
            if not (0 < self.coverage_min <= self.coverage_max):
                raise ValueError("need 0 < coverage_min <= coverage_max when initialized")

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))


def covariance3d(g: Gaussian3D):
    """World-space covariance R diag(exp(log_scale))^2 R^T of one Gaussian."""
    R = quat_to_rotmat(g.rotation)
    s = np.exp(g.log_scale)
    M = R * s[None, :]
    return M @ M.T


def covariance3d_batch(rotations, log_scales):
    R = quat_to_rotmat(rotations)
    s = np.exp(log_scales)
    M = R * s[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


@dataclass
class Scene:
    """Multi-scale Gaussian set, stored struct-of-arrays for vector math."""

    positions: np.ndarray          # (N, 3)
    rotations: np.ndarray          # (N, 4)
    log_scales: np.ndarray         # (N, 3)
    opacity_logits: np.ndarray     # (N,)
    sh_coeffs: np.ndarray          # (N, 3, (D+1)^2)
    levels: np.ndarray             # (N,) int
    creation_scales: np.ndarray    # (N,) int
    coverage_max: np.ndarray       # (N,)
    coverage_min: np.ndarray       # (N,)
    coverage_initialized: np.ndarray  # (N,) bool
    l_max: int = 4
    bound_B: float = 1.0
    sh_degree: int = 1
    train_scale_min: int = 1
    train_scale_max: int = 64

    @classmethod
    def empty(cls, sh_degree=1, l_max=4, bound_B=1.0):
        m = sh_dim(sh_degree)
        return cls(
            positions=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)),
            opacity_logits=np.zeros(0),
            sh_coeffs=np.zeros((0, 3, m)),
            levels=np.zeros(0, dtype=np.int64),
            creation_scales=np.ones(0, dtype=np.int64),
            coverage_max=np.full(0, np.nan),
            coverage_min=np.full(0, np.nan),
            coverage_initialized=np.zeros(0, dtype=bool),
            l_max=l_max,
            bound_B=bound_B,
            sh_degree=sh_degree,
            train_scale_max=4 ** (l_max - 1),
        )

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree=1, l_max=4, bound_B=1.0):
        scene = cls.empty(sh_degree=sh_degree, l_max=l_max, bound_B=bound_B)
        if not gaussians:
            return scene
        m = sh_dim(sh_degree)
        scene.positions = np.stack([g.position for g in gaussians])
        scene.rotations = np.stack([g.rotation for g in gaussians])
        scene.log_scales = np.stack([g.log_scale for g in gaussians])
        scene.opacity_logits = np.array([g.opacity_logit for g in gaussians])
        sh = np.zeros((len(gaussians), 3, m))
        for i, g in enumerate(gaussians):
            k = min(m, g.sh_coeffs.shape[1])
            sh[i, :, :k] = g.sh_coeffs[:, :k]
        scene.sh_coeffs = sh
        scene.levels = np.array([g.level for g in gaussians], dtype=np.int64)
        scene.creation_scales = np.array([g.creation_scale for g in gaussians], dtype=np.int64)
        scene.coverage_max = np.array([g.coverage_max for g in gaussians], dtype=np.float64)
        scene.coverage_min = np.array([g.coverage_min for g in gaussians], dtype=np.float64)
        scene.coverage_initialized = np.array(
            [g.coverage_initialized for g in gaussians], dtype=bool
        )
        scene.validate()
        return scene

    def __len__(self):
        return self.positions.shape[0]

    @property
    def num_gaussians(self):
        return len(self)

    def gaussian(self, i) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i].copy(),
            level=int(self.levels[i]),
            creation_scale=int(self.creation_scales[i]),
            coverage_max=float(self.coverage_max[i]),
            coverage_min=float(self.coverage_min[i]),
            coverage_initialized=bool(self.coverage_initialized[i]),
        )

    def gaussians(self):
        return [self.gaussian(i) for i in range(len(self))]

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    def validate(self):
        if self.bound_B <= 0:
            raise ValueError("bound_B must be positive")
        if len(self) == 0:
            return
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > QUAT_NORM_TOL):
            raise ValueError("scene contains non-unit quaternions")
        if np.any(self.levels < 1) or np.any(self.levels > self.l_max):
            raise ValueError("scene contains levels outside [1, l_max]")
        if np.any(self.creation_scales != 4 ** (self.levels - 1)):
            raise ValueError("creation_scale must equal 4^(level-1)")
        init = self.coverage_initialized
        if np.any(init):
            cmin, cmax = self.coverage_min[init], self.coverage_max[init]
            if np.any(~(0 < cmin)) or np.any(cmin > cmax):
                raise ValueError("initialized coverage ranges must satisfy 0 < min <= max")

    def subset(self, mask_or_idx) -> "Scene":
        s = Scene(
            positions=self.positions[mask_or_idx].copy(),
            rotations=self.rotations[mask_or_idx].copy(),
            log_scales=self.log_scales[mask_or_idx].copy(),
            opacity_logits=self.opacity_logits[mask_or_idx].copy(),
            sh_coeffs=self.sh_coeffs[mask_or_idx].copy(),
            levels=self.levels[mask_or_idx].copy(),
            creation_scales=self.creation_scales[mask_or_idx].copy(),
            coverage_max=self.coverage_max[mask_or_idx].copy(),
            coverage_min=self.coverage_min[mask_or_idx].copy(),
            coverage_initialized=self.coverage_initialized[mask_or_idx].copy(),
            l_max=self.l_max,
            bound_B=self.bound_B,
            sh_degree=self.sh_degree,
            train_scale_min=self.train_scale_min,
            train_scale_max=self.train_scale_max,
        )
        return s

    def copy(self) -> "Scene":
        return self.subset(slice(None))

    def extend(self, other: "Scene"):
        """Append another scene's Gaussians in place (metadata kept from self)."""
        if other.sh_coeffs.shape[2] != self.sh_coeffs.shape[2] and len(self) and len(other):
            raise ValueError("sh dimensions differ")
        self.positions = np.concatenate([self.positions, other.positions])
        self.rotations = np.concatenate([self.rotations, other.rotations])
        self.log_scales = np.concatenate([self.log_scales, other.log_scales])
        self.opacity_logits = np.concatenate([self.opacity_logits, other.opacity_logits])
        if len(self.sh_coeffs) == 0:
            self.sh_coeffs = other.sh_coeffs.copy()
        elif len(other.sh_coeffs) > 0:
            self.sh_coeffs = np.concatenate([self.sh_coeffs, other.sh_coeffs])
        self.levels = np.concatenate([self.levels, other.levels])
        self.creation_scales = np.concatenate([self.creation_scales, other.creation_scales])
        self.coverage_max = np.concatenate([self.coverage_max, other.coverage_max])
        self.coverage_min = np.concatenate([self.coverage_min, other.coverage_min])
        self.coverage_initialized = np.concatenate(
            [self.coverage_initialized, other.coverage_initialized]
        )


@dataclass
class Camera:
    """Pinhole camera, world-to-camera extrinsics, looking down -z.

    Image u axis is +x_cam, v axis is +y_cam; depth of a point is
    -z_cam. Pixel (ix, iy) is sampled at center (ix + 0.5, iy + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    cam_id: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > ROT_ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (max error {err})")

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def at_scale(self, s) -> "Camera":
        """Camera for the s-times downsampled image; dimensions must divide."""
        s = int(s)
        if s < 1:
            raise ValueError("scale must be >= 1")
        if self.width % s or self.height % s:
            raise ValueError(f"image {self.width}x{self.height} not divisible by scale {s}")
        return Camera(
            fx=self.fx / s, fy=self.fy / s, cx=self.cx / s, cy=self.cy / s,
            width=self.width // s, height=self.height // s,
            rotation=self.rotation.copy(), translation=self.translation.copy(),
            cam_id=self.cam_id,
        )


@dataclass
class Splat2D:
    """A single projected Gaussian in screen space."""

    mean2d: np.ndarray    # (2,) pixels
    cov2d: np.ndarray     # (2, 2) pixels^2, pre low-pass
    cov2d_lp: np.ndarray  # (2, 2) cov2d + dilation * I
    depth: float
    color: np.ndarray     # (3,) in [0, 1]
    opacity: float
    coverage: float       # S_k pixels
    source_index: int = 0


@dataclass
class RenderStats:
    wall_time: float = 0.0
    num_selected: int = 0
    num_splatted: int = 0
    scene_size: int = 0
    blends_per_pixel: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))

    def validate(self):
        if not (self.num_selected <= self.num_splatted <= self.scene_size):
            raise ValueError(
                f"expected num_selected <= num_splatted <= scene size, got "
                f"{self.num_selected} / {self.num_splatted} / {self.scene_size}"
            )

    @property
    def total_blends(self):
        return int(np.sum(self.blends_per_pixel * np.arange(len(self.blends_per_pixel))))
