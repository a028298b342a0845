"""Hot numeric kernels: Kuwahara smoothing, bilinear backward warping and
RBF kernel sums.

Every kernel exists twice: an explicit-loop version compiled with numba and a
vectorized numpy version. ``_accel.USE_NUMBA`` picks which one the public
function dispatches to; both are importable directly for testing and the
benchmark.
"""
import numpy as np

from . import _accel

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _compile(fn):
    if numba is None:  # pragma: no cover
        return None
    return numba.njit(cache=True)(fn)


# ---------------------------------------------------------------------------
# Kuwahara


def _kuwahara_loops(padded, radius, out):
    # padded: (C, H + 2r, W + 2r) float64 with integer values, so every
    # prefix-sum difference below is exact
    C, Hp, Wp = padded.shape
    H = Hp - 2 * radius
    W = Wp - 2 * radius
    side = radius + 1
    n = side * side
    P = np.zeros((C + 2, Hp + 1, Wp + 1))  # channels, luminance, luminance^2
    for yy in range(Hp):
        for xx in range(Wp):
            v = 0.0
            for c in range(C):
                v += padded[c, yy, xx]
                P[c, yy + 1, xx + 1] = padded[c, yy, xx]
            P[C, yy + 1, xx + 1] = v
            P[C + 1, yy + 1, xx + 1] = v * v
    for k in range(C + 2):
        for yy in range(1, Hp + 1):
            for xx in range(1, Wp + 1):
                P[k, yy, xx] += P[k, yy - 1, xx] + P[k, yy, xx - 1] - P[k, yy - 1, xx - 1]
    for y in range(H):
        for x in range(W):
            best_q = 0
            best_var = np.inf
            for q in range(4):
                y0 = y if q < 2 else y + radius
                x0 = x if q % 2 == 0 else x + radius
                s = P[C, y0 + side, x0 + side] - P[C, y0, x0 + side] - P[C, y0 + side, x0] + P[C, y0, x0]
                s2 = (P[C + 1, y0 + side, x0 + side] - P[C + 1, y0, x0 + side]
                      - P[C + 1, y0 + side, x0] + P[C + 1, y0, x0])
                var = n * s2 - s * s
                if var < best_var:
                    best_var = var
                    best_q = q
            y0 = y if best_q < 2 else y + radius
            x0 = x if best_q % 2 == 0 else x + radius
            for c in range(C):
                acc = P[c, y0 + side, x0 + side] - P[c, y0, x0 + side] - P[c, y0 + side, x0] + P[c, y0, x0]
                out[c, y, x] = acc / n
    return out


_kuwahara_jit = _compile(_kuwahara_loops)


def _box_sums(a, side):
    """Sums over every side x side window of the last two axes (valid mode)."""
    cs = np.zeros(a.shape[:-2] + (a.shape[-2] + 1, a.shape[-1] + 1))
    cs[..., 1:, 1:] = a.cumsum(-2).cumsum(-1)
    return (cs[..., side:, side:] - cs[..., :-side, side:]
            - cs[..., side:, :-side] + cs[..., :-side, :-side])


def kuwahara_numpy(image, radius):
    padded = np.pad(image.astype(np.float64), ((0, 0), (radius, radius), (radius, radius)),
                    mode="reflect")
    C, H, W = image.shape
    side = radius + 1
    n = side * side
    lum = padded.sum(axis=0)
    s = _box_sums(lum, side)
    s2 = _box_sums(lum * lum, side)
    csum = _box_sums(padded, side)
    var = n * s2 - s * s
    # window starting at (i, j) in padded coords; quadrant offsets relative to (y, x)
    offs = [(0, 0), (0, radius), (radius, 0), (radius, radius)]
    vq = np.stack([var[oy:oy + H, ox:ox + W] for oy, ox in offs])
    best = np.argmin(vq, axis=0)
    means = np.stack([csum[:, oy:oy + H, ox:ox + W] for oy, ox in offs]) / n
    return np.take_along_axis(means, best[None, None], axis=0)[0]


def kuwahara_numba(image, radius):
    padded = np.pad(image.astype(np.float64), ((0, 0), (radius, radius), (radius, radius)),
                    mode="reflect")
    out = np.empty(image.shape, dtype=np.float64)
    return _kuwahara_jit(padded, radius, out)


def kuwahara(image, radius):
    """Kuwahara filter of a (C, H, W) image; variance is taken on the channel sum."""
    if _accel.USE_NUMBA:
        return kuwahara_numba(image, radius)
    return kuwahara_numpy(image, radius)


# ---------------------------------------------------------------------------
# Bilinear backward warp


def _warp_loops(image, ys, xs, out):
    C, H, W = image.shape
    for y in range(H):
        for x in range(W):
            sy = min(max(ys[y, x], 0.0), H - 1.0)
            sx = min(max(xs[y, x], 0.0), W - 1.0)
            y0 = int(np.floor(sy))
            x0 = int(np.floor(sx))
            y1 = min(y0 + 1, H - 1)
            x1 = min(x0 + 1, W - 1)
            wy = sy - y0
            wx = sx - x0
            for c in range(C):
                top = (1.0 - wx) * image[c, y0, x0] + wx * image[c, y0, x1]
                bot = (1.0 - wx) * image[c, y1, x0] + wx * image[c, y1, x1]
                out[c, y, x] = (1.0 - wy) * top + wy * bot
    return out


_warp_jit = _compile(_warp_loops)


def warp_numpy(image, ys, xs):
    C, H, W = image.shape
    sy = np.clip(ys, 0.0, H - 1.0)
    sx = np.clip(xs, 0.0, W - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = sy - y0
    wx = sx - x0
    img = image.astype(np.float64)
    top = (1.0 - wx) * img[:, y0, x0] + wx * img[:, y0, x1]
    bot = (1.0 - wx) * img[:, y1, x0] + wx * img[:, y1, x1]
    return (1.0 - wy) * top + wy * bot


def warp_numba(image, ys, xs):
    out = np.empty(image.shape, dtype=np.float64)
    return _warp_jit(image.astype(np.float64), ys.astype(np.float64), xs.astype(np.float64), out)


def warp(image, ys, xs):
    """Sample ``image`` at pixel coordinates (ys, xs) with bilinear interpolation.

    Coordinates are clamped to the image, so out-of-range samples replicate the
    border.
    """
    if _accel.USE_NUMBA:
        return warp_numba(image, ys, xs)
    return warp_numpy(image, ys, xs)


# ---------------------------------------------------------------------------
# RBF kernel sums


def _rbf_loops(queries, points, groups, n_groups, gamma, log_max, sums):
    M, d = queries.shape
    N = points.shape[0]
    logw = np.empty(N)
    for m in range(M):
        mx = -np.inf
        for i in range(N):
            acc = 0.0
            for k in range(d):
                diff = queries[m, k] - points[i, k]
                acc += diff * diff
            logw[i] = -gamma * acc
            if logw[i] > mx:
                mx = logw[i]
        log_max[m] = mx
        # Neumaier-compensated sums per group
        for g in range(n_groups):
            s = 0.0
            comp = 0.0
            for i in range(N):
                if groups[i] != g:
                    continue
                v = np.exp(logw[i] - mx)
                t = s + v
                if abs(s) >= abs(v):
                    comp += (s - t) + v
                else:
                    comp += (v - t) + s
                s = t
            sums[m, g] = s + comp
    return log_max, sums


_rbf_jit = _compile(_rbf_loops)


def rbf_group_sums_numpy(queries, points, groups, n_groups, gamma):
    diff = queries[:, None, :] - points[None, :, :]
    logw = -gamma * np.einsum("mnd,mnd->mn", diff, diff)
    log_max = logw.max(axis=1)
    w = np.exp(logw - log_max[:, None])
    onehot = np.zeros((points.shape[0], n_groups))
    onehot[np.arange(points.shape[0]), groups] = 1.0
    return log_max, w @ onehot


def rbf_group_sums_numba(queries, points, groups, n_groups, gamma):
    M = queries.shape[0]
    log_max = np.empty(M)
    sums = np.empty((M, n_groups))
    return _rbf_jit(np.ascontiguousarray(queries, dtype=np.float64),
                    np.ascontiguousarray(points, dtype=np.float64),
                    np.ascontiguousarray(groups, dtype=np.int64), int(n_groups),
                    float(gamma), log_max, sums)


def rbf_group_sums(queries, points, groups, n_groups, gamma):
    """Per-query sums of exp(-gamma * ||q - x||^2), grouped by ``groups``.

    Returns ``(log_max, sums)``: the true sum for query m and group g is
    ``exp(log_max[m]) * sums[m, g]``. The shift by the per-query maximum keeps
    the sums representable when ``gamma * d`` is large.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    groups = np.asarray(groups, dtype=np.int64)
    if _accel.USE_NUMBA:
        return rbf_group_sums_numba(queries, points, groups, n_groups, gamma)
    return rbf_group_sums_numpy(queries, points, groups, n_groups, gamma)
