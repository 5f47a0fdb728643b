"""Tile-based front-to-back alpha compositing, naive oracle, backward pass.

Compositing follows the standard splatting blend: per pixel,
C = sum_i c_i * alpha_i * T_i + T_final * background, with
alpha_i = min(0.99, sigma_i * G_i(pixel)), terms below 1/255 skipped
and the walk stopped once transmittance falls under 1e-4.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .core import Camera, RenderStats
from .projection import SplatBatch

TILE = 16
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4


def _as_batch(splats) -> SplatBatch:
    if isinstance(splats, SplatBatch):
        return splats
    return SplatBatch.from_splats(list(splats))


def _conics(cov2d_lp):
    a = cov2d_lp[:, 0, 0]
    b = cov2d_lp[:, 0, 1]
    c = cov2d_lp[:, 1, 1]
    det = a * c - b * b
    if np.any(det <= 0):
        raise ValueError("cov2d_lp must be positive definite")
    return np.stack([c / det, -b / det, a / det], axis=1)


def _footprint_radii(cov2d_lp, opacity):
    """Radius beyond which alpha < 1/255 is guaranteed (level-set bound)."""
    a = cov2d_lp[:, 0, 0]
    b = cov2d_lp[:, 0, 1]
    c = cov2d_lp[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.clip((0.5 * (a - c)) ** 2 + b * b, 0.0, None))
    ln_term = np.log(np.clip(255.0 * opacity, 1.0, None))
    return np.sqrt(2.0 * ln_term * np.clip(lam_max, 0.0, None))


def _tile_lists(batch: SplatBatch, cam: Camera):
    """Per-tile splat index lists, depth-sorted with index tie-break.

    Tiles are filled from each splat's exact 1/255 footprint radius so
    the tile walk sees every splat the naive rasterizer would blend.
    """
    m = len(batch)
    tw = (cam.width + TILE - 1) // TILE
    th = (cam.height + TILE - 1) // TILE
    order = np.lexsort((batch.source_index, batch.depth))
    rank = np.empty(m, dtype=np.int64)
    rank[order] = np.arange(m)
    radii = _footprint_radii(batch.cov2d_lp, batch.opacity)

    mx, my = batch.mean2d[:, 0], batch.mean2d[:, 1]
    x0 = np.clip(np.floor((mx - radii) / TILE).astype(np.int64), 0, tw - 1)
    x1 = np.clip(np.floor((mx + radii) / TILE).astype(np.int64), 0, tw - 1)
    y0 = np.clip(np.floor((my - radii) / TILE).astype(np.int64), 0, th - 1)
    y1 = np.clip(np.floor((my + radii) / TILE).astype(np.int64), 0, th - 1)
    nx, ny = x1 - x0 + 1, y1 - y0 + 1

    pairs_tile, pairs_idx, pairs_rank = [], [], []
    for oy in range(int(ny.max())):
        for ox in range(int(nx.max())):
            sel = np.nonzero((ox < nx) & (oy < ny))[0]
            if len(sel) == 0:
                continue
            pairs_tile.append((y0[sel] + oy) * tw + (x0[sel] + ox))
            pairs_idx.append(sel)
            pairs_rank.append(rank[sel])
    pairs_tile = np.concatenate(pairs_tile)
    pairs_idx = np.concatenate(pairs_idx)
    pairs_rank = np.concatenate(pairs_rank)
    # per-tile order is the global (depth, source_index) order
    sort = np.lexsort((pairs_rank, pairs_tile))
    pairs_tile = pairs_tile[sort]
    pairs_idx = pairs_idx[sort]
    counts = np.bincount(pairs_tile, minlength=tw * th)
    offsets = np.zeros(tw * th + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return pairs_idx, offsets, tw, th


@njit(cache=True)
def _forward_tiles(width, height, tw, means, conics, colors, opacities, skip_power,
                   tile_idx, tile_off, background, out, n_contrib):
    n_tiles = tile_off.shape[0] - 1
    for t in range(n_tiles):
        ty, tx = t // tw, t % tw
        px0, py0 = tx * TILE, ty * TILE
        px1 = min(px0 + TILE, width)
        py1 = min(py0 + TILE, height)
        for py in range(py0, py1):
            for px in range(px0, px1):
                cx = px + 0.5
                cy = py + 0.5
                T = 1.0
                r = g = b = 0.0
                cnt = 0
                for k in range(tile_off[t], tile_off[t + 1]):
                    i = tile_idx[k]
                    dx = cx - means[i, 0]
                    dy = cy - means[i, 1]
                    power = (-0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy)
                             - conics[i, 1] * dx * dy)
                    if power < skip_power[i]:
                        continue
                    alpha = opacities[i] * np.exp(power)
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    w = alpha * T
                    r += colors[i, 0] * w
                    g += colors[i, 1] * w
                    b += colors[i, 2] * w
                    cnt += 1
                    T *= 1.0 - alpha
                    if T < T_STOP:
                        break
                out[py, px, 0] = r + T * background[0]
                out[py, px, 1] = g + T * background[1]
                out[py, px, 2] = b + T * background[2]
                n_contrib[py, px] = cnt


@njit(cache=True)
def _forward_naive(width, height, means, conics, colors, opacities, order,
                   background, out):
    for py in range(height):
        for px in range(width):
            cx = px + 0.5
            cy = py + 0.5
            T = 1.0
            r = g = b = 0.0
            for k in range(order.shape[0]):
                i = order[k]
                dx = cx - means[i, 0]
                dy = cy - means[i, 1]
                power = (-0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy)
                         - conics[i, 1] * dx * dy)
                alpha = opacities[i] * np.exp(power)
                if alpha > ALPHA_CLAMP:
                    alpha = ALPHA_CLAMP
                if alpha < ALPHA_SKIP:
                    continue
                w = alpha * T
                r += colors[i, 0] * w
                g += colors[i, 1] * w
                b += colors[i, 2] * w
                T *= 1.0 - alpha
                if T < T_STOP:
                    break
            out[py, px, 0] = r + T * background[0]
            out[py, px, 1] = g + T * background[1]
            out[py, px, 2] = b + T * background[2]


@njit(cache=True)
def _backward_tiles(width, height, tw, means, conics, colors, opacities, skip_power,
                    tile_idx, tile_off, final_img, grad_img,
                    g_color, g_opacity, g_mean, g_conic):
    n_tiles = tile_off.shape[0] - 1
    for t in range(n_tiles):
        ty, tx = t // tw, t % tw
        px0, py0 = tx * TILE, ty * TILE
        px1 = min(px0 + TILE, width)
        py1 = min(py0 + TILE, height)
        for py in range(py0, py1):
            for px in range(px0, px1):
                cx = px + 0.5
                cy = py + 0.5
                gr = grad_img[py, px, 0]
                gg = grad_img[py, px, 1]
                gb = grad_img[py, px, 2]
                if gr == 0.0 and gg == 0.0 and gb == 0.0:
                    continue
                T = 1.0
                acc_r = acc_g = acc_b = 0.0
                for k in range(tile_off[t], tile_off[t + 1]):
                    i = tile_idx[k]
                    dx = cx - means[i, 0]
                    dy = cy - means[i, 1]
                    power = (-0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy)
                             - conics[i, 1] * dx * dy)
                    if power < skip_power[i]:
                        continue
                    gexp = np.exp(power)
                    raw = opacities[i] * gexp
                    clamped = raw > ALPHA_CLAMP
                    alpha = ALPHA_CLAMP if clamped else raw
                    if alpha < ALPHA_SKIP:
                        continue
                    w = alpha * T
                    contrib_r = colors[i, 0] * w
                    contrib_g = colors[i, 1] * w
                    contrib_b = colors[i, 2] * w

                    g_color[i, 0] += w * gr
                    g_color[i, 1] += w * gg
                    g_color[i, 2] += w * gb

                    # everything blended behind i (incl. background) scales
                    # with (1 - alpha_i): suffix = final - front - self
                    suff_r = final_img[py, px, 0] - acc_r - contrib_r
                    suff_g = final_img[py, px, 1] - acc_g - contrib_g
                    suff_b = final_img[py, px, 2] - acc_b - contrib_b
                    dC_dalpha = ((colors[i, 0] * T - suff_r / (1.0 - alpha)) * gr
                                 + (colors[i, 1] * T - suff_g / (1.0 - alpha)) * gg
                                 + (colors[i, 2] * T - suff_b / (1.0 - alpha)) * gb)
                    if not clamped:
                        g_opacity[i] += dC_dalpha * gexp
                        dL_dpower = dC_dalpha * alpha
                        g_mean[i, 0] += dL_dpower * (conics[i, 0] * dx + conics[i, 1] * dy)
                        g_mean[i, 1] += dL_dpower * (conics[i, 2] * dy + conics[i, 1] * dx)
                        g_conic[i, 0] += dL_dpower * (-0.5 * dx * dx)
                        g_conic[i, 1] += dL_dpower * (-dx * dy)
                        g_conic[i, 2] += dL_dpower * (-0.5 * dy * dy)

                    acc_r += contrib_r
                    acc_g += contrib_g
                    acc_b += contrib_b
                    T *= 1.0 - alpha
                    if T < T_STOP:
                        break


def _check_finite(batch: SplatBatch):
    for name, arr in (("mean2d", batch.mean2d), ("cov2d_lp", batch.cov2d_lp),
                      ("color", batch.color), ("opacity", batch.opacity),
                      ("depth", batch.depth)):
        if not np.all(np.isfinite(arr)):
            bad = int(np.argwhere(~np.isfinite(arr.reshape(len(batch), -1)).all(axis=1))[0, 0])
            raise ValueError(
                f"non-finite splat parameters in '{name}' (splat {bad}, "
                f"source {int(batch.source_index[bad])}): upstream numerical blow-up"
            )


def _skip_powers(opacities):
    """Log-space guard: alpha < 1/255 whenever power < ln(1/(255*sigma))."""
    return np.log(ALPHA_SKIP) - np.log(np.clip(opacities, 1e-300, None))


def rasterize(splats, cam: Camera, background=(0.0, 0.0, 0.0)):
    """Tile-based rasterization; returns (H, W, 3) image and RenderStats."""
    batch = _as_batch(splats)
    _check_finite(batch)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    out = np.zeros((cam.height, cam.width, 3))
    n_contrib = np.zeros((cam.height, cam.width), dtype=np.int64)
    if len(batch) == 0:
        out[:] = bg
        stats = RenderStats(num_selected=0, num_splatted=0, scene_size=0,
                            blends_per_pixel=np.bincount(n_contrib.ravel()))
        return out, stats
    conics = _conics(batch.cov2d_lp)
    tile_idx, tile_off, tw, th = _tile_lists(batch, cam)
    _forward_tiles(cam.width, cam.height, tw, batch.mean2d, conics, batch.color,
                   batch.opacity, _skip_powers(batch.opacity),
                   tile_idx, tile_off, bg, out, n_contrib)
    stats = RenderStats(
        num_selected=len(batch), num_splatted=len(batch), scene_size=len(batch),
        blends_per_pixel=np.bincount(n_contrib.ravel()),
    )
    return out, stats


def rasterize_naive(splats, cam: Camera, background=(0.0, 0.0, 0.0)):
    """Oracle: every splat evaluated at every pixel under a global depth sort."""
    batch = _as_batch(splats)
    _check_finite(batch)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    out = np.zeros((cam.height, cam.width, 3))
    if len(batch) == 0:
        out[:] = bg
        return out
    conics = _conics(batch.cov2d_lp)
    order = np.lexsort((batch.source_index, batch.depth))
    _forward_naive(cam.width, cam.height, batch.mean2d, conics, batch.color,
                   batch.opacity, order, bg, out)
    return out


def rasterize_backward(splats, cam: Camera, image, image_grad,
                       background=(0.0, 0.0, 0.0)):
    """Analytic gradients of sum(image * image_grad) w.r.t. splat parameters.

    Recomputes the per-pixel blend front to back; returns a dict with
    per-splat 'color' (M,3), 'opacity' (M,), 'mean2d' (M,2) and 'cov2d'
    (M,2,2 symmetric) gradients.
    """
    batch = _as_batch(splats)
    m = len(batch)
    g_color = np.zeros((m, 3))
    g_opacity = np.zeros(m)
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    if m:
        conics = _conics(batch.cov2d_lp)
        tile_idx, tile_off, tw, th = _tile_lists(batch, cam)
        _backward_tiles(cam.width, cam.height, tw, batch.mean2d, conics, batch.color,
                        batch.opacity, _skip_powers(batch.opacity),
                        tile_idx, tile_off,
                        np.ascontiguousarray(image, dtype=np.float64),
                        np.ascontiguousarray(image_grad, dtype=np.float64),
                        g_color, g_opacity, g_mean, g_conic)
        # chain conic -> covariance: A = cov^-1, dL/dcov = -A G A
        A = np.empty((m, 2, 2))
        A[:, 0, 0] = conics[:, 0]
        A[:, 0, 1] = A[:, 1, 0] = conics[:, 1]
        A[:, 1, 1] = conics[:, 2]
        G = np.empty((m, 2, 2))
        G[:, 0, 0] = g_conic[:, 0]
        G[:, 0, 1] = G[:, 1, 0] = 0.5 * g_conic[:, 1]
        G[:, 1, 1] = g_conic[:, 2]
        g_cov = -np.einsum("nab,nbc,ncd->nad", A, G, A)
    else:
        g_cov = np.zeros((0, 2, 2))
    return {"color": g_color, "opacity": g_opacity, "mean2d": g_mean, "cov2d": g_cov}
