"""Numba compositing kernels.

All kernels share one alpha evaluation so the tiled renderer, its backward
pass and the brute-force reference agree to the last bit on which splats
contribute.  ``feats`` carries K per-splat channels composited together
(colour plus view depth); the background applies to every channel.
"""

import numpy as np
from numba import njit, prange

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
# kernels take the three limits packed as lim = (alpha_max, alpha_min, t_stop)


@njit(inline="always")
def _gauss_alpha(px, py, mx, my, ca, cb, cc, op):
    dx = px - mx
    dy = py - my
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    g = np.exp(power)
    raw = op * g
    return dx, dy, g, raw


@njit(cache=True)
def bin_splats(mean2, radius, valid, depth, width, height, tile):
    """Tile lists of overlapping splats, each sorted by (depth, index).

    Returns ``(tile_start, tile_end, order)`` where ``order[tile_start[t]:
    tile_end[t]]`` holds the splat indices for tile ``t``.
    """
    n = mean2.shape[0]
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    x0 = np.empty(n, np.int64)
    x1 = np.empty(n, np.int64)
    y0 = np.empty(n, np.int64)
    y1 = np.empty(n, np.int64)
    total = 0
    for i in range(n):
        if not valid[i]:
            x0[i] = 1
            x1[i] = 0
            y0[i] = 1
            y1[i] = 0
            continue
        r = radius[i]
        lo_x = mean2[i, 0] - r
        hi_x = mean2[i, 0] + r
        lo_y = mean2[i, 1] - r
        hi_y = mean2[i, 1] + r
        if hi_x < 0 or hi_y < 0 or lo_x > width - 1 or lo_y > height - 1:
            x0[i] = 1
            x1[i] = 0
            y0[i] = 1
            y1[i] = 0
            continue
        x0[i] = int(np.floor(max(lo_x, 0.0))) // tile
        x1[i] = int(np.floor(min(hi_x, width - 1.0))) // tile
        y0[i] = int(np.floor(max(lo_y, 0.0))) // tile
        y1[i] = int(np.floor(min(hi_y, height - 1.0))) // tile
        total += (x1[i] - x0[i] + 1) * (y1[i] - y0[i] + 1)
    tiles = np.empty(total, np.int64)
    ids = np.empty(total, np.int64)
    k = 0
    for i in range(n):
        for ty in range(y0[i], y1[i] + 1):
            for tx in range(x0[i], x1[i] + 1):
                tiles[k] = ty * ntx + tx
                ids[k] = i
                k += 1
    # sort by (tile, depth, index); stable mergesort keeps index order on ties
    d = depth[ids]
    perm = np.argsort(ids, kind="mergesort")
    perm = perm[np.argsort(d[perm], kind="mergesort")]
    perm = perm[np.argsort(tiles[perm], kind="mergesort")]
    order = ids[perm]
    tiles_sorted = tiles[perm]
    tile_start = np.zeros(ntx * nty, np.int64)
    tile_end = np.zeros(ntx * nty, np.int64)
    for j in range(total):
        t = tiles_sorted[j]
        if j == 0 or tiles_sorted[j - 1] != t:
            tile_start[t] = j
        tile_end[t] = j + 1
    return tile_start, tile_end, order


@njit(parallel=True, cache=True)
def composite_tiles(mean2, conic, opac, feats, bg, tile_start, tile_end, order, width, height, tile, lim,
                    out_feat, out_alpha, out_T, out_last):
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    kf = feats.shape[1]
    for t in prange(ntx * nty):
        ty = t // ntx
        tx = t - ty * ntx
        s = tile_start[t]
        e = tile_end[t]
        acc = np.zeros(kf, np.float64)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                asum = 0.0
                for k in range(kf):
                    acc[k] = 0.0
                last = s
                for idx in range(s, e):
                    g = order[idx]
                    dx, dy, gv, a = _gauss_alpha(px, py, mean2[g, 0], mean2[g, 1],
                                                 conic[g, 0], conic[g, 1], conic[g, 2], opac[g])
                    if a > lim[0]:
                        a = lim[0]
                    if a < lim[1]:
                        continue
                    w = a * T
                    for k in range(kf):
                        acc[k] += feats[g, k] * w
                    asum += w
                    T = T * (1.0 - a)
                    last = idx + 1
                    if T < lim[2]:
                        break
                for k in range(kf):
                    out_feat[py, px, k] = acc[k] + T * bg[k]
                out_alpha[py, px] = asum
                out_T[py, px] = T
                out_last[py, px] = last


@njit(parallel=True, cache=True)
def composite_tiles_backward(mean2, conic, opac, feats, bg, tile_start, tile_end, order, width, height, tile, lim,
                             out_T, out_last, grad_out, g_mean2, g_conic, g_opac, g_feat):
    """Per-entry gradients aligned with ``order``; each tile owns its slice."""
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    kf = feats.shape[1]
    for t in prange(ntx * nty):
        ty = t // ntx
        tx = t - ty * ntx
        s = tile_start[t]
        accum = np.zeros(kf, np.float64)
        last_feat = np.zeros(kf, np.float64)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                t_final = out_T[py, px]
                T = t_final
                bg_dot = 0.0
                for k in range(kf):
                    accum[k] = 0.0
                    last_feat[k] = 0.0
                    bg_dot += bg[k] * grad_out[py, px, k]
                last_alpha = 0.0
                for idx in range(out_last[py, px] - 1, s - 1, -1):
                    g = order[idx]
                    dx, dy, gv, raw = _gauss_alpha(px, py, mean2[g, 0], mean2[g, 1],
                                                   conic[g, 0], conic[g, 1], conic[g, 2], opac[g])
                    a = raw
                    clamped = False
                    if a > lim[0]:
                        a = lim[0]
                        clamped = True
                    if a < lim[1]:
                        continue
                    T = T / (1.0 - a)
                    w = a * T
                    dl_da = 0.0
                    for k in range(kf):
                        gk = grad_out[py, px, k]
                        g_feat[idx, k] += w * gk
                        accum[k] = last_alpha * last_feat[k] + (1.0 - last_alpha) * accum[k]
                        dl_da += (feats[g, k] - accum[k]) * gk
                        last_feat[k] = feats[g, k]
                    dl_da *= T
                    dl_da += -t_final / (1.0 - a) * bg_dot
                    last_alpha = a
                    if clamped:
                        continue
                    g_opac[idx] += gv * dl_da
                    dpow = raw * dl_da
                    g_mean2[idx, 0] += dpow * (conic[g, 0] * dx + conic[g, 1] * dy)
                    g_mean2[idx, 1] += dpow * (conic[g, 2] * dy + conic[g, 1] * dx)
                    g_conic[idx, 0] += -0.5 * dx * dx * dpow
                    g_conic[idx, 1] += -dx * dy * dpow
                    g_conic[idx, 2] += -0.5 * dy * dy * dpow


@njit(parallel=True, cache=True)
def composite_reference(mean2, conic, opac, feats, bg, order, width, height, lim, out_feat, out_alpha, out_T):
    """Per-pixel loop over the globally sorted splat list: no tiles, no culling."""
    kf = feats.shape[1]
    n = order.shape[0]
    for py in prange(height):
        acc = np.zeros(kf, np.float64)
        for px in range(width):
            T = 1.0
            asum = 0.0
            for k in range(kf):
                acc[k] = 0.0
            for idx in range(n):
                g = order[idx]
                dx, dy, gv, a = _gauss_alpha(px, py, mean2[g, 0], mean2[g, 1],
                                             conic[g, 0], conic[g, 1], conic[g, 2], opac[g])
                if a > lim[0]:
                    a = lim[0]
                if a < lim[1]:
                    continue
                w = a * T
                for k in range(kf):
                    acc[k] += feats[g, k] * w
                asum += w
                T = T * (1.0 - a)
                if T < lim[2]:
                    break
            for k in range(kf):
                out_feat[py, px, k] = acc[k] + T * bg[k]
            out_alpha[py, px] = asum
            out_T[py, px] = T
