"""Image quality metrics and the multi-scale benchmark harness."""

from __future__ import annotations

import json
import time

import numpy as np
from scipy.ndimage import convolve1d

from .pipeline import BENCH_MODES, render_view

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
DEFAULT_SCALES = (1, 2, 4, 8, 16, 32, 64, 128)


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0,1] images; capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _ssim_kernel(size, sigma):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _window_for(shape):
    w = min(SSIM_WINDOW, shape[0], shape[1])
    if w % 2 == 0:
        w -= 1
    return max(w, 1), SSIM_SIGMA * max(w, 1) / SSIM_WINDOW


def _filt_valid(img, k):
    p = len(k) // 2
    out = convolve1d(img, k, axis=0, mode="constant")
    out = convolve1d(out, k, axis=1, mode="constant")
    if p:
        out = out[p:-p, p:-p]
    return out


def _filt_valid_adjoint(grad, k, shape):
    p = len(k) // 2
    full = np.zeros(shape)
    if p:
        full[p:-p, p:-p] = grad
    else:
        full[:] = grad
    full = convolve1d(full, k, axis=0, mode="constant")
    full = convolve1d(full, k, axis=1, mode="constant")
    return full


def _ssim_channel(x, y, k, want_grad):
    mu_x = _filt_valid(x, k)
    mu_y = _filt_valid(y, k)
    mxx = _filt_valid(x * x, k)
    myy = _filt_valid(y * y, k)
    mxy = _filt_valid(x * y, k)
    sx = mxx - mu_x ** 2
    sy = myy - mu_y ** 2
    sxy = mxy - mu_x * mu_y
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * sxy + SSIM_C2
    b1 = mu_x ** 2 + mu_y ** 2 + SSIM_C1
    b2 = sx + sy + SSIM_C2
    den = b1 * b2
    s_map = a1 * a2 / den
    value = float(s_map.mean())
    if not want_grad:
        return value, None
    n = s_map.size
    d_mu = (2 * mu_y * (a2 - a1) / den - 2 * mu_x * s_map * (b2 - b1) / den) / n
    d_mxx = (-s_map * b1 / den) / n
    d_mxy = (2 * a1 / den) / n
    grad = (_filt_valid_adjoint(d_mu, k, x.shape)
            + _filt_valid_adjoint(d_mxx, k, x.shape) * 2 * x
            + _filt_valid_adjoint(d_mxy, k, x.shape) * y)
    return value, grad


def ssim(a, b):
    """Mean SSIM over channels, Gaussian-windowed, valid region only."""
    v, _ = ssim_and_grad(a, b, want_grad=False)
    return v


def ssim_and_grad(a, b, want_grad=True):
    """(ssim, d ssim / d a); the window shrinks for images under 11 px."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    w, sigma = _window_for(a.shape)
    k = _ssim_kernel(w, sigma)
    vals = []
    grads = np.zeros_like(a) if want_grad else None
    for c in range(a.shape[2]):
        v, g = _ssim_channel(a[:, :, c], b[:, :, c], k, want_grad)
        vals.append(v)
        if want_grad:
            grads[:, :, c] = g / a.shape[2]
    return float(np.mean(vals)), grads


def bench(scene, cameras, truth, scales=DEFAULT_SCALES, modes=("single_scale", "multi_scale"),
          lp=None, select_cfg=None, background=(0.0, 0.0, 0.0), repetitions=5):
    """Benchmark rows over (scale, mode) cells.

    truth: {(cam_id, scale): image}. Timing covers projection, selection
    and rasterization only; the median over >= `repetitions` renders per
    camera is averaged across cameras.
    """
    rows = []
    for scale in scales:
        for mode in modes:
            if mode not in BENCH_MODES:
                raise ValueError(f"unknown mode {mode!r}")
            psnrs, ssims, times, nsel, nsplat, blends = [], [], [], [], [], []
            for cam in cameras:
                image = stats = None
                reps = []
                for _ in range(max(repetitions, 5)):
                    t0 = time.perf_counter()
                    image, stats = render_view(scene, cam, scale, mode=mode,
                                               lp=lp, select_cfg=select_cfg,
                                               background=background)
                    reps.append(time.perf_counter() - t0)
                times.append(float(np.median(reps)))
                gt = truth[(cam.cam_id, scale)]
                psnrs.append(psnr(image, gt))
                ssims.append(ssim(image, gt))
                nsel.append(stats.num_selected)
                nsplat.append(stats.num_splatted)
                npix = image.shape[0] * image.shape[1]
                blends.append(stats.total_blends / npix)
            rows.append({
                "scale": int(scale),
                "mode": mode,
                "psnr": float(np.mean(psnrs)),
                "ssim": float(np.mean(ssims)),
                "ms_per_image": float(np.mean(times) * 1e3),
                "num_selected": float(np.mean(nsel)),
                "num_splatted": float(np.mean(nsplat)),
                "blends_per_pixel": float(np.mean(blends)),
            })
    return rows


def format_bench_table(rows):
    header = ["scale", "mode", "PSNR", "SSIM", "ms/img", "selected", "splatted", "blends/px"]
    lines = ["\t".join(header)]
    for r in rows:
        lines.append("\t".join([
            str(r["scale"]), r["mode"], f"{r['psnr']:.3f}", f"{r['ssim']:.4f}",
            f"{r['ms_per_image']:.3f}", f"{r['num_selected']:.1f}",
            f"{r['num_splatted']:.1f}", f"{r['blends_per_pixel']:.2f}",
        ]))
    return "\n".join(lines)


def write_bench_records(rows, path):
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r) + "\n")
