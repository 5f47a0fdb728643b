"""Command-line entry point wiring synthesis, fitting, LOD build and bench."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import eval as ev
from . import io as mio
from .lod_build import build_multiscale
from .optim import TrainConfig, full_gradient_check, train
from .pipeline import BENCH_MODES, render_view
from .projection import LowPassConfig
from .select import SelectConfig


def _read_config(path):
    out = {}
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ValueError(f"{path} line {ln}: expected key=value, got {body!r}")
            k, v = body.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _coerce(value, like):
    if isinstance(like, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        elem = like[0] if like else 1
        return tuple(type(elem)(p) for p in parts)
    return value


def _apply_overrides(cfgs, overrides):
    unknown = dict(overrides)
    for cfg in cfgs:
        for f in dataclasses.fields(cfg):
            if f.name in unknown:
                cur = getattr(cfg, f.name)
                setattr(cfg, f.name, _coerce(unknown.pop(f.name), cur))
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")


def _echo_config(cfgs):
    print("# effective config")
    for cfg in cfgs:
        name = type(cfg).__name__
        for f in dataclasses.fields(cfg):
            print(f"{name}.{f.name}={getattr(cfg, f.name)}")


def _setup(args):
    if args.threads:
        os.environ.setdefault("NUMBA_NUM_THREADS", str(args.threads))
        try:
            import numba
            numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))
        except (ImportError, ValueError):
            pass
    train_cfg = TrainConfig()
    select_cfg = SelectConfig()
    lp = LowPassConfig()
    overrides = _read_config(args.config) if args.config else {}
    _apply_overrides([train_cfg, select_cfg, lp], overrides)
    if args.seed is not None:
        train_cfg.seed = args.seed
    _echo_config([train_cfg, select_cfg, lp])
    return train_cfg, select_cfg, lp


def _load_truth(truth_dir, cameras, scales):
    truth = {}
    for cam in cameras:
        for s in scales:
            p = os.path.join(truth_dir, f"truth_cam{cam.cam_id}_s{s}.png")
            truth[(cam.cam_id, int(s))] = mio.read_image(p)
    return truth


def cmd_synth(args, cfgs):
    train_cfg, _, _ = cfgs
    data = mio.synth_scene(args.kind, seed=train_cfg.seed, scales=train_cfg.scales)
    os.makedirs(args.out, exist_ok=True)
    mio.write_ply(data.target, os.path.join(args.out, "target.ply"))
    mio.write_ply(data.init, os.path.join(args.out, "init.ply"))
    mio.write_cameras(data.cameras, os.path.join(args.out, "cameras.txt"))
    for (cam_id, s), img in data.truth.items():
        mio.write_image(img, os.path.join(args.out, f"truth_cam{cam_id}_s{s}.png"))
    print(f"wrote {len(data.target)} gaussians, {len(data.cameras)} cameras to {args.out}")
    return 0


def cmd_fit(args, cfgs):
    train_cfg, select_cfg, lp = cfgs
    scene = mio.read_ply(args.scene)
    cameras = mio.read_cameras(args.cameras)
    truth = _load_truth(args.truth, cameras, train_cfg.scales)
    dataset = [(cam, {s: truth[(cam.cam_id, s)] for s in train_cfg.scales})
               for cam in cameras]
    fitted, logs = train(scene, dataset, train_cfg, lp=lp, select_cfg=select_cfg)
    mio.write_ply(fitted, args.out)
    if args.log:
        with open(args.log, "w") as f:
            for rec in logs:
                f.write(json.dumps(rec) + "\n")
    print(f"fit done: {logs[-1]['gaussian_count']} gaussians, "
          f"final loss {logs[-1]['loss']:.6f}")
    return 0


def cmd_build_lod(args, cfgs):
    _, select_cfg, lp = cfgs
    scene = mio.read_ply(args.scene)
    cameras = mio.read_cameras(args.cameras)
    inserted = build_multiscale(scene, cameras, lp=lp, cfg=select_cfg)
    mio.write_ply(scene, args.out)
    total = sum(inserted.values())
    print(f"inserted {total} coarse gaussians {inserted}; scene now {len(scene)}")
    return 0


def cmd_render(args, cfgs):
    _, select_cfg, lp = cfgs
    scene = mio.read_ply(args.scene)
    cameras = {c.cam_id: c for c in mio.read_cameras(args.cameras)}
    if args.cam_id not in cameras:
        raise ValueError(f"camera id {args.cam_id} not in {sorted(cameras)}")
    mode = "single_scale" if args.no_select else args.mode
    image, stats = render_view(scene, cameras[args.cam_id], args.scale, mode=mode,
                               lp=lp, select_cfg=select_cfg)
    mio.write_image(image, args.out)
    print(f"rendered {image.shape[1]}x{image.shape[0]} ({mode}), "
          f"{stats.num_selected}/{stats.scene_size} selected, "
          f"{stats.wall_time * 1e3:.1f} ms")
    return 0


def cmd_bench(args, cfgs):
    _, select_cfg, lp = cfgs
    scene = mio.read_ply(args.scene)
    cameras = mio.read_cameras(args.cameras)
    scales = tuple(int(s) for s in args.scales.split(","))
    modes = tuple(args.modes.split(","))
    truth = _load_truth(args.truth, cameras, scales)
    rows = ev.bench(scene, cameras, truth, scales=scales, modes=modes,
                    lp=lp, select_cfg=select_cfg, repetitions=args.reps)
    print(ev.format_bench_table(rows))
    if args.out:
        ev.write_bench_records(rows, args.out)
    return 0


def cmd_eval(args, cfgs):
    a = mio.read_image(args.a)
    b = mio.read_image(args.b)
    print(f"psnr={ev.psnr(a, b):.4f} ssim={ev.ssim(a, b):.6f}")
    return 0


def cmd_grad_check(args, cfgs):
    train_cfg, _, lp = cfgs
    data = mio.synth_scene("random_cloud", seed=train_cfg.seed, n=5, image_size=8,
                           scales=(1,))
    errs = full_gradient_check(data.target, data.cameras[0], lp=lp)
    worst = max(errs.values())
    for k, v in errs.items():
        print(f"{k}: rel error {v:.3e}")
    print(f"worst {worst:.3e} ({'ok' if worst < args.tol else 'FAIL'})")
    return 0 if worst < args.tol else 4


def build_parser():
    p = argparse.ArgumentParser(prog="msplat",
                                description="Multi-scale Gaussian splatting pipeline")
    p.add_argument("--seed", type=int, default=None, help="override RNG seed")
    p.add_argument("--threads", type=int, default=0,
                   help="cap worker threads (default: all cores)")
    p.add_argument("--config", default=None, help="key=value config file")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene + truth images")
    s.add_argument("--kind", required=True,
                   choices=("checker_wall", "random_cloud", "near_far"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit", help="optimize a scene against truth images")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", default=None, help="ndjson per-iteration log")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("build-lod", help="insert coarse levels into a scene")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_lod)

    s = sub.add_parser("render", help="render one camera at one scale")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--cam-id", type=int, default=0)
    s.add_argument("--scale", type=int, default=1)
    s.add_argument("--mode", default="multi_scale", choices=BENCH_MODES)
    s.add_argument("--no-select", action="store_true",
                   help="plain level-1 baseline (overrides --mode)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("bench", help="PSNR/SSIM/time table over scales and modes")
    s.add_argument("--scene", required=True)
    s.add_argument("--cameras", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--scales", default="1,4,16,64")
    s.add_argument("--modes", default="single_scale,multi_scale")
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--out", default=None, help="ndjson records")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("eval", help="metrics between two images")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grad-check", help="finite-difference gradient audit")
    s.add_argument("--tol", type=float, default=1e-3)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfgs = _setup(args)
        return args.func(args, cfgs)
    except FileNotFoundError as e:
        print(f"error (missing file): {e}", file=sys.stderr)
        return 3
    except (ValueError, mio.PlyParseError) as e:
        print(f"error (bad input): {e}", file=sys.stderr)
        return 3
    except FloatingPointError as e:
        print(f"error (numerical): {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
