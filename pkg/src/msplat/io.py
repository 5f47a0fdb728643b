"""Persistence (PLY scenes, camera lists, images) and synthetic scenes."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .core import Camera, Scene, logit, sh_dim

COVERAGE_SENTINEL = -1.0

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PlyParseError(ValueError):
    """Malformed PLY input; message carries the byte offset of the fault."""


def _scene_dtype(m):
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
              ("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    fields += [(f"f_dc_{i}", "<f8") for i in range(3)]
    fields += [(f"f_rest_{i}", "<f8") for i in range(3 * (m - 1))]
    fields += [("opacity", "<f8")]
    fields += [(f"scale_{i}", "<f8") for i in range(3)]
    fields += [(f"rot_{i}", "<f8") for i in range(4)]
    fields += [("level", "u1"), ("coverage_max", "<f8"), ("coverage_min", "<f8"),
               ("creation_scale", "<i4")]
    return np.dtype(fields)


def write_ply(scene: Scene, path):
    """Binary little-endian PLY, 3DGS vertex layout plus LOD extensions.

    Float fields are stored as double so a write/read round trip is
    bit-exact; plain 3DGS readers that only look at the standard fields
    still parse the file.
    """
    m = scene.sh_coeffs.shape[2]
    rec = np.zeros(len(scene), dtype=_scene_dtype(m))
    rec["x"], rec["y"], rec["z"] = scene.positions.T
    for c in range(3):
        rec[f"f_dc_{c}"] = scene.sh_coeffs[:, c, 0]
    # f_rest is channel-major: all higher coefficients of R, then G, then B
    for c in range(3):
        for j in range(m - 1):
            rec[f"f_rest_{c * (m - 1) + j}"] = scene.sh_coeffs[:, c, j + 1]
    rec["opacity"] = scene.opacity_logits
    for i in range(3):
        rec[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = scene.rotations[:, i]
    rec["level"] = scene.levels
    rec["coverage_max"] = np.where(scene.coverage_initialized,
                                   scene.coverage_max, COVERAGE_SENTINEL)
    rec["coverage_min"] = np.where(scene.coverage_initialized,
                                   scene.coverage_min, COVERAGE_SENTINEL)
    rec["creation_scale"] = scene.creation_scales

    header = ["ply", "format binary_little_endian 1.0",
              f"comment msplat sh_degree={scene.sh_degree} l_max={scene.l_max} "
              f"bound_B={scene.bound_B!r} train_scale_min={scene.train_scale_min} "
              f"train_scale_max={scene.train_scale_max}",
              f"element vertex {len(scene)}"]
    type_names = {"f8": "double", "f4": "float", "u1": "uchar", "i4": "int"}
    for name in rec.dtype.names:
        kind = rec.dtype[name].str.lstrip("<>|=")
        header.append(f"property {type_names[kind]} {name}")
    header.append("end_header\n")
    with open(path, "wb") as f:
        f.write("\n".join(header).encode("ascii"))
        f.write(rec.tobytes())


def _parse_ply_header(data):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n"):
        raise PlyParseError("byte 0: missing 'ply' magic")
    if end < 0:
        raise PlyParseError("byte 4: header has no end_header line")
    body_offset = end + len(b"end_header\n")
    lines = data[:end].decode("ascii", errors="replace").split("\n")
    n_vertex = None
    props = []
    meta = {}
    offset = 0
    in_vertex = False
    for line in lines:
        tok = line.split()
        if tok[:1] == ["format"]:
            if tok[1:2] != ["binary_little_endian"]:
                raise PlyParseError(f"byte {offset}: unsupported format {line!r}")
        elif tok[:1] == ["comment"]:
            for kv in tok[1:]:
                if "=" in kv:
                    k, v = kv.split("=", 1)
                    meta[k] = v
        elif tok[:1] == ["element"]:
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except (IndexError, ValueError):
                    raise PlyParseError(f"byte {offset}: bad element line {line!r}")
        elif tok[:1] == ["property"] and in_vertex:
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PlyParseError(f"byte {offset}: unsupported property line {line!r}")
            props.append((tok[2], "<" + _PLY_TYPES[tok[1]]))
        offset += len(line.encode("ascii", errors="replace")) + 1
    if n_vertex is None:
        raise PlyParseError(f"byte {body_offset}: no vertex element in header")
    return n_vertex, props, meta, body_offset


def read_ply(path) -> Scene:
    """Read a scene; plain 3DGS files get level-1 / uninitialized defaults."""
    with open(path, "rb") as f:
        data = f.read()
    n, props, meta, off = _parse_ply_header(data)
    names = [p[0] for p in props]
    dt = np.dtype(props)
    need = n * dt.itemsize
    have = len(data) - off
    if have < need:
        raise PlyParseError(
            f"byte {off}: truncated body, header declares {n} vertices "
            f"({need} bytes) but {have // dt.itemsize} vertices ({have} bytes) present"
        )
    rec = np.frombuffer(data, dtype=dt, count=n, offset=off)

    n_rest = sum(1 for nm in names if nm.startswith("f_rest_"))
    if n_rest % 3:
        raise PlyParseError(f"byte {off}: f_rest count {n_rest} not divisible by 3")
    m = n_rest // 3 + 1
    degree = int(round(np.sqrt(m))) - 1
    if sh_dim(degree) != m:
        raise PlyParseError(f"byte {off}: sh coefficient count {m} is not square")
    for nm in ("x", "opacity", "scale_0", "rot_0"):
        if nm not in names:
            raise PlyParseError(f"byte {off}: required property {nm!r} missing")

    scene = Scene.empty(sh_degree=degree,
                        l_max=int(meta.get("l_max", 4)),
                        bound_B=float(meta.get("bound_B", 1.0)))
    scene.train_scale_min = int(meta.get("train_scale_min", 1))
    scene.train_scale_max = int(meta.get("train_scale_max", scene.train_scale_max))
    scene.positions = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    scene.rotations = np.stack([rec[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64)
    scene.log_scales = np.stack([rec[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64)
    scene.opacity_logits = rec["opacity"].astype(np.float64)
    sh = np.zeros((n, 3, m))
    for c in range(3):
        sh[:, c, 0] = rec[f"f_dc_{c}"]
        for j in range(m - 1):
            sh[:, c, j + 1] = rec[f"f_rest_{c * (m - 1) + j}"]
    scene.sh_coeffs = sh
    if "level" in names:
        scene.levels = rec["level"].astype(np.int64)
    else:
        scene.levels = np.ones(n, dtype=np.int64)
    if "creation_scale" in names:
        scene.creation_scales = rec["creation_scale"].astype(np.int64)
    else:
        scene.creation_scales = 4 ** (scene.levels - 1)
    if "coverage_max" in names:
        cmax = rec["coverage_max"].astype(np.float64)
        cmin = rec["coverage_min"].astype(np.float64)
        init = (cmax != COVERAGE_SENTINEL) & (cmin != COVERAGE_SENTINEL)
        scene.coverage_max = np.where(init, cmax, np.nan)
        scene.coverage_min = np.where(init, cmin, np.nan)
        scene.coverage_initialized = init
    else:
        scene.coverage_max = np.full(n, np.nan)
        scene.coverage_min = np.full(n, np.nan)
        scene.coverage_initialized = np.zeros(n, dtype=bool)
    for nm in ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs"):
        if not np.all(np.isfinite(getattr(scene, nm))):
            raise PlyParseError(f"byte {off}: non-finite values in {nm}")
    scene.validate()
    return scene


def write_cameras(cameras, path):
    """One camera per line: id w h fx fy cx cy r00..r22 t0 t1 t2."""
    with open(path, "w") as f:
        f.write("# id width height fx fy cx cy rotation(9, row-major) translation(3)\n")
        for c in cameras:
            ints = [int(c.cam_id), int(c.width), int(c.height)]
            floats = [c.fx, c.fy, c.cx, c.cy]
            floats += list(c.rotation.reshape(-1)) + list(c.translation)
            f.write(" ".join([str(v) for v in ints]
                             + [repr(float(v)) for v in floats]) + "\n")


def read_cameras(path):
    cameras = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            tok = body.split()
            if len(tok) != 19:
                raise ValueError(f"{path} line {ln}: expected 19 fields, got {len(tok)}")
            try:
                cam_id, w, h = int(tok[0]), int(tok[1]), int(tok[2])
                vals = [float(t) for t in tok[3:]]
            except ValueError as e:
                col = next(i for i, t in enumerate(tok)
                           if not re.fullmatch(r"[-+0-9.eE]+", t))
                raise ValueError(f"{path} line {ln} field {col + 1}: not a number: "
                                 f"{tok[col]!r}") from e
            cameras.append(Camera(
                fx=vals[0], fy=vals[1], cx=vals[2], cy=vals[3], width=w, height=h,
                rotation=np.array(vals[4:13]).reshape(3, 3),
                translation=np.array(vals[13:16]), cam_id=cam_id,
            ))
    return cameras


def quantize(image):
    """[0,1] float -> 8-bit levels and back, round half up."""
    q = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5)
    return q / 255.0


def write_image(image, path):
    """8-bit PNG or ASCII PPM (P3) depending on the extension."""
    img8 = np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    path = str(path)
    if path.endswith(".ppm"):
        h, w = img8.shape[:2]
        lines = [f"P3\n{w} {h}\n255"]
        for row in img8.reshape(h, -1):
            lines.append(" ".join(str(v) for v in row))
        with open(path, "w") as f:
            f.write("\n".join(lines) + "\n")
    else:
        Image.fromarray(img8, mode="RGB").save(path)


def read_image(path):
    path = str(path)
    if path.endswith(".ppm"):
        with open(path) as f:
            tok = f.read().split()
        if tok[0] != "P3":
            raise ValueError(f"{path}: expected ASCII PPM magic P3, got {tok[0]!r}")
        w, h, maxval = int(tok[1]), int(tok[2]), int(tok[3])
        vals = np.array(tok[4:4 + w * h * 3], dtype=np.float64)
        if vals.size != w * h * 3:
            raise ValueError(f"{path}: expected {w * h * 3} samples, got {vals.size}")
        return (vals / maxval).reshape(h, w, 3)
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def downsample(image, s):
    """Area-average downsample by an integer factor."""
    h, w = image.shape[:2]
    if h % s or w % s:
        raise ValueError(f"image {h}x{w} not divisible by scale {s}")
    return image.reshape(h // s, s, w // s, s, -1).mean(axis=(1, 3))


# --- synthetic scenes -------------------------------------------------------


@dataclass
class SynthData:
    """A generated benchmark problem: target scene, perturbed init, truth."""

    target: Scene
    init: Scene
    cameras: list
    truth: dict  # (cam_id, scale) -> float image


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera rotation/translation with -z toward `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    zc = -fwd
    xc = np.cross(np.asarray(up, dtype=np.float64), zc)
    xc = xc / np.linalg.norm(xc)
    yc = np.cross(zc, xc)
    R = np.stack([xc, yc, zc])
    return R, -R @ eye


def _wall(n_side, extent, z, sigma, opacity, rng, colors, depth_jitter=0.0):
    """Planar grid of Gaussians; colors indexed by checker parity."""
    lin = (np.arange(n_side) + 0.5) / n_side * 2.0 - 1.0
    gx, gy = np.meshgrid(lin * extent, lin * extent, indexing="xy")
    n = n_side * n_side
    pos = np.stack([gx.reshape(-1), gy.reshape(-1), np.full(n, float(z))], axis=1)
    if depth_jitter:
        pos[:, 2] += rng.uniform(-depth_jitter, depth_jitter, size=n)
    parity = ((np.arange(n) // n_side) + (np.arange(n) % n_side)) % 2
    dc = np.asarray(colors, dtype=np.float64)[parity]
    from .projection import SH_C0
    sh = np.zeros((n, 3, 4))
    sh[:, :, 0] = (dc - 0.5) / SH_C0
    scene = Scene.empty(sh_degree=1)
    scene.positions = pos
    scene.rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    scene.log_scales = np.full((n, 3), np.log(sigma))
    scene.opacity_logits = np.full(n, float(logit(opacity)))
    scene.sh_coeffs = sh
    scene.levels = np.ones(n, dtype=np.int64)
    scene.creation_scales = np.ones(n, dtype=np.int64)
    scene.coverage_max = np.full(n, np.nan)
    scene.coverage_min = np.full(n, np.nan)
    scene.coverage_initialized = np.zeros(n, dtype=bool)
    return scene


def _make_truth(scene, cameras, scales, background):
    from .projection import LowPassConfig, project_scene
    from .raster import rasterize
    lp = LowPassConfig()
    bg = np.asarray(background, dtype=np.float64)
    truth = {}
    for cam in cameras:
        batch = project_scene(scene, cam, lp)
        base, _ = rasterize(batch, cam, background=bg)
        for s in scales:
            truth[(cam.cam_id, int(s))] = quantize(downsample(base, int(s)))
    return truth


def _perturb(scene, rng, sh_noise=0.15):
    init = scene.copy()
    init.sh_coeffs = init.sh_coeffs + rng.normal(0.0, sh_noise, init.sh_coeffs.shape)
    init.coverage_max[:] = np.nan
    init.coverage_min[:] = np.nan
    init.coverage_initialized[:] = False
    return init


def synth_scene(kind, seed=0, scales=(1, 4, 16, 64), background=(0.0, 0.0, 0.0),
                **params) -> SynthData:
    """Deterministic synthetic benchmark scenes.

    checker_wall: one dense grid of tiny alternating-color Gaussians.
    random_cloud: uniform random Gaussians in a cube.
    near_far: a distant high-frequency wall plus a near coarse wall, so
    one image mixes sub-pixel and multi-pixel footprints.
    """
    rng = np.random.default_rng(seed)
    if kind == "checker_wall":
        n_side = int(params.pop("n_side", 64))
        base = int(params.pop("image_size", 128))
        if params:
            raise ValueError(f"unknown params {sorted(params)}")
        target = _wall(n_side, extent=4.0, z=-20.0, sigma=0.012, opacity=0.9,
                       rng=rng, colors=[(0.9, 0.15, 0.1), (0.1, 0.8, 0.15)],
                       depth_jitter=0.05)
        f = base * 1.2
        cams = []
        for i, ex in enumerate([(0.0, 0.0, 0.0), (3.0, 1.0, -1.0)]):
            R, t = look_at(ex, (0.0, 0.0, -20.0))
            cams.append(Camera(fx=f, fy=f, cx=base / 2, cy=base / 2,
                               width=base, height=base, rotation=R, translation=t,
                               cam_id=i))
    elif kind == "random_cloud":
        n = int(params.pop("n", 200))
        base = int(params.pop("image_size", 64))
        if params:
            raise ValueError(f"unknown params {sorted(params)}")
        target = Scene.empty(sh_degree=1)
        q = rng.normal(size=(n, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        target.positions = rng.uniform(-2.0, 2.0, (n, 3)) + [0.0, 0.0, -8.0]
        target.rotations = q
        target.log_scales = rng.uniform(np.log(0.02), np.log(0.4), (n, 3))
        target.opacity_logits = logit(rng.uniform(0.2, 0.95, n))
        sh = np.zeros((n, 3, 4))
        sh[:, :, 0] = rng.uniform(-1.2, 1.2, (n, 3))
        sh[:, :, 1:] = rng.uniform(-0.2, 0.2, (n, 3, 3))
        target.sh_coeffs = sh
        target.levels = np.ones(n, dtype=np.int64)
        target.creation_scales = np.ones(n, dtype=np.int64)
        target.coverage_max = np.full(n, np.nan)
        target.coverage_min = np.full(n, np.nan)
        target.coverage_initialized = np.zeros(n, dtype=bool)
        f = base * 1.1
        cams = []
        for i, ex in enumerate([(0.0, 0.0, 4.0), (2.5, 1.5, 3.0)]):
            R, t = look_at(ex, (0.0, 0.0, -8.0))
            cams.append(Camera(fx=f, fy=f, cx=base / 2, cy=base / 2,
                               width=base, height=base, rotation=R, translation=t,
                               cam_id=i))
    elif kind == "near_far":
        far_side = int(params.pop("far_side", 160))
        near_side = int(params.pop("near_side", 24))
        base = int(params.pop("image_size", 256))
        if params:
            raise ValueError(f"unknown params {sorted(params)}")
        far = _wall(far_side, extent=4.0, z=-21.0, sigma=0.010, opacity=0.9,
                    rng=rng, colors=[(0.92, 0.12, 0.08), (0.08, 0.85, 0.12)],
                    depth_jitter=0.05)
        near = _wall(near_side, extent=2.0, z=-8.0, sigma=0.11, opacity=0.85,
                     rng=rng, colors=[(0.2, 0.3, 0.95), (0.95, 0.85, 0.2)])
        near.positions[:, 0] += 3.2  # keep part of the far wall unoccluded
        target = far
        target.extend(near)
        f = base * 1.5
        cams = []
        for i, ex in enumerate([(0.0, 0.0, 0.0), (-12.8, 0.5, 0.0), (12.8, -0.5, 0.0)]):
            R, t = look_at(ex, (0.0, 0.0, -21.0))
            cams.append(Camera(fx=f, fy=f, cx=base / 2, cy=base / 2,
                               width=base, height=base, rotation=R, translation=t,
                               cam_id=i))
    else:
        raise ValueError(f"unknown scene kind {kind!r}")

    from .lod_build import bound_from_cameras
    target.bound_B = bound_from_cameras(cams)
    truth = _make_truth(target, cams, scales, background)
    init = _perturb(target, rng)
    return SynthData(target=target, init=init, cameras=cams, truth=truth)
