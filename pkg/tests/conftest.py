import numpy as np
import pytest

from msplat.core import Camera, Scene
from msplat.projection import SH_C0


def simple_camera(size=32, f=None, cam_id=0):
    """Camera at the origin looking down -z, square image."""
    f = f or size * 1.2
    return Camera(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size,
                  rotation=np.eye(3), translation=np.zeros(3), cam_id=cam_id)


def random_scene(rng, n, depth_range=(4.0, 12.0), spread=2.0, sh_degree=1):
    """Random well-conditioned Gaussians in front of the origin camera."""
    scene = Scene.empty(sh_degree=sh_degree)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    pos = rng.uniform(-spread, spread, (n, 3))
    pos[:, 2] = -rng.uniform(*depth_range, n)
    scene.positions = pos
    scene.rotations = q
    scene.log_scales = rng.uniform(np.log(0.05), np.log(0.5), (n, 3))
    scene.opacity_logits = np.log(rng.uniform(0.2, 0.9, n) / (1 - rng.uniform(0.2, 0.9, n)))
    m = (sh_degree + 1) ** 2
    sh = np.zeros((n, 3, m))
    sh[:, :, 0] = rng.uniform(-1.0, 1.0, (n, 3))
    if m > 1:
        sh[:, :, 1:] = rng.uniform(-0.15, 0.15, (n, 3, m - 1))
    scene.sh_coeffs = sh
    scene.levels = np.ones(n, dtype=np.int64)
    scene.creation_scales = np.ones(n, dtype=np.int64)
    scene.coverage_max = np.full(n, np.nan)
    scene.coverage_min = np.full(n, np.nan)
    scene.coverage_initialized = np.zeros(n, dtype=bool)
    scene.validate()
    return scene


def solid_color_sh(rgb):
    """Degree-0-style sh_coeffs row producing a constant color."""
    return (np.asarray(rgb, dtype=np.float64)[:, None] - 0.5) / SH_C0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
