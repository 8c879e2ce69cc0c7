"""Hot inner loops.

Every kernel comes in two flavours: a numba-compiled loop (``*_nb``) and a
numpy/scipy path (``*_np``). The public name is bound to one of them at import
time according to :data:`nrvm._accel.USE_NUMBA`. Both paths produce identical
results (bit-identical for the integer/selection kernels, identical up to
summation order for im2col/col2im).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from ._accel import USE_NUMBA, njit

EMPTY_DEPTH = -np.inf


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------


def _im2col_np(xp, k, stride, ho, wo):
    # xp: padded NHWC input; columns ordered (ki, kj, c)
    n, c = xp.shape[0], xp.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : stride * ho : stride, : stride * wo : stride]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, k * k * c)


def _col2im_np(cols, n, hp, wp, c, k, stride, ho, wo):
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    c6 = cols.reshape(n, ho, wo, k, k, c)
    for ki in range(k):
        for kj in range(k):
            out[:, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride, :] += c6[:, :, :, ki, kj, :]
    return out


def _im2col_loop(xp, k, stride, ho, wo):
    n, c = xp.shape[0], xp.shape[3]
    cols = np.empty((n * ho * wo, k * k * c), dtype=xp.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                col = 0
                for ki in range(k):
                    for kj in range(k):
                        for ch in range(c):
                            cols[row, col] = xp[b, i * stride + ki, j * stride + kj, ch]
                            col += 1
    return cols


def _col2im_loop(cols, n, hp, wp, c, k, stride, ho, wo):
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                col = 0
                for ki in range(k):
                    for kj in range(k):
                        for ch in range(c):
                            out[b, i * stride + ki, j * stride + kj, ch] += cols[row, col]
                            col += 1
    return out


# ---------------------------------------------------------------------------
# forward splatting with z-test
# ---------------------------------------------------------------------------


def _splat_loop(src, disp, du, dv):
    h, w, c = src.shape
    out = np.zeros((h, w, c), dtype=src.dtype)
    depth = np.full((h, w), -np.inf)
    for y in range(h):
        for x in range(w):
            d = disp[y, x]
            tx = int(np.floor(x - d * du + 0.5))
            ty = int(np.floor(y - d * dv + 0.5))
            if tx < 0 or tx >= w or ty < 0 or ty >= h:
                continue
            # strict: first writer in scan order keeps a tie
            if d > depth[ty, tx]:
                depth[ty, tx] = d
                for ch in range(c):
                    out[ty, tx, ch] = src[y, x, ch]
    return out, depth


def _splat_np(src, disp, du, dv):
    h, w, c = src.shape
    ys, xs = np.mgrid[0:h, 0:w]
    d = disp.astype(np.float64).ravel()
    tx = np.floor(xs.ravel() - d * du + 0.5).astype(np.int64)
    ty = np.floor(ys.ravel() - d * dv + 0.5).astype(np.int64)
    scan = np.arange(h * w)
    ok = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    tgt = (ty * w + tx)[ok]
    dd, ss = d[ok], scan[ok]
    order = np.lexsort((ss, -dd, tgt))
    tgt, dd, ss = tgt[order], dd[order], ss[order]
    first = np.ones(tgt.size, dtype=bool)
    first[1:] = tgt[1:] != tgt[:-1]
    out = np.zeros((h * w, c), dtype=src.dtype)
    depth = np.full(h * w, -np.inf)
    out[tgt[first]] = src.reshape(-1, c)[ss[first]]
    depth[tgt[first]] = dd[first]
    return out.reshape(h, w, c), depth.reshape(h, w)


# ---------------------------------------------------------------------------
# nearest valid pixel (Euclidean, ties -> lowest scan index)
# ---------------------------------------------------------------------------


def _nearest_valid_loop(holes):
    h, w = holes.shape
    src = np.arange(h * w).reshape(h, w)
    rmax = max(h, w)
    for y in range(h):
        for x in range(w):
            if not holes[y, x]:
                continue
            best = np.inf
            bi = -1
            for r in range(1, rmax + 1):
                for yy in range(max(0, y - r), min(h, y + r + 1)):
                    dy = yy - y
                    if dy == -r or dy == r:
                        step = 1
                    else:
                        step = 2 * r
                    xx = x - r
                    while xx <= x + r:
                        if 0 <= xx < w and not holes[yy, xx]:
                            dx = xx - x
                            d2 = dy * dy + dx * dx
                            idx = yy * w + xx
                            if d2 < best or (d2 == best and idx < bi):
                                best = d2
                                bi = idx
                        xx += step
                if bi >= 0 and best < (r + 1) * (r + 1):
                    break
            src[y, x] = bi
    return src


def _nearest_valid_np(holes):
    h, w = holes.shape
    src = np.arange(h * w).reshape(h, w)
    hy, hx = np.nonzero(holes)
    vy, vx = np.nonzero(~holes)
    if hy.size == 0 or vy.size == 0:
        if vy.size == 0:
            src[holes] = -1
        return src
    valid = np.column_stack([vy, vx])
    tree = cKDTree(valid)
    dist, _ = tree.query(np.column_stack([hy, hx]), k=1)
    vidx = vy * w + vx
    for y, x, dd in zip(hy, hx, dist):
        cand = tree.query_ball_point((y, x), r=dd + 1e-6)
        cand = np.asarray(cand)
        d2 = (vy[cand] - y) ** 2 + (vx[cand] - x) ** 2
        best = d2.min()
        src[y, x] = vidx[cand][d2 == best].min()
    return src


# ---------------------------------------------------------------------------
# response balancing queue
# ---------------------------------------------------------------------------


def _find(parent, i):
    # path halving
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def _balance_loop(d, xi, eps, nxt, prv, out, n_sel, target, rejects, max_rejects):
    """Consume draws from ``xi`` until the target or the rejection cap is hit.

    ``d`` is sorted ascending. ``nxt``/``prv`` are union-find parents over
    indices shifted by one (slot 0 and slot n+1 are sentinels), pointing to the
    next/previous alive record. Returns ``(n_sel, rejects, consumed)``.
    """
    n = d.shape[0]
    used = 0
    for t in range(xi.shape[0]):
        if n_sel >= target or rejects >= max_rejects:
            break
        used += 1
        x = xi[t]
        # first index with d >= x
        lo, hi = 0, n
        while lo < hi:
            mid = (lo + hi) // 2
            if d[mid] < x:
                lo = mid + 1
            else:
                hi = mid
        r = _find(nxt, lo + 1) - 1
        l = _find(prv, lo) - 1
        best = -1
        gap = np.inf
        if l >= 0:
            best = l
            gap = x - d[l]
        if r < n:
            g = d[r] - x
            if g < gap:
                best = r
                gap = g
        if best < 0 or gap > eps:
            rejects += 1
            continue
        rejects = 0
        out[n_sel] = best
        n_sel += 1
        nxt[best + 1] = best + 2
        prv[best + 1] = best
    return n_sel, rejects, used


# ---------------------------------------------------------------------------
# overlap accumulation for sliding-window maps
# ---------------------------------------------------------------------------


def _accumulate_windows_loop(values, h, w, stride, size):
    acc = np.zeros((h, w))
    cnt = np.zeros((h, w))
    ny, nx = values.shape
    for i in range(ny):
        for j in range(nx):
            v = values[i, j]
            y0 = i * stride
            x0 = j * stride
            for y in range(y0, y0 + size):
                for x in range(x0, x0 + size):
                    acc[y, x] += v
                    cnt[y, x] += 1.0
    return acc, cnt


def _accumulate_windows_np(values, h, w, stride, size):
    acc = np.zeros((h, w))
    cnt = np.zeros((h, w))
    ny, nx = values.shape
    for i in range(ny):
        for j in range(nx):
            y0, x0 = i * stride, j * stride
            acc[y0 : y0 + size, x0 : x0 + size] += values[i, j]
            cnt[y0 : y0 + size, x0 : x0 + size] += 1.0
    return acc, cnt


if njit is not None:
    _im2col_nb = njit(_im2col_loop)
    _col2im_nb = njit(_col2im_loop)
    _splat_nb = njit(_splat_loop)
    _nearest_valid_nb = njit(_nearest_valid_loop)
    _find_nb = njit(_find)
    _accumulate_windows_nb = njit(_accumulate_windows_loop)

    @njit
    def _balance_nb(d, xi, eps, nxt, prv, out, n_sel, target, rejects, max_rejects):
        n = d.shape[0]
        used = 0
        for t in range(xi.shape[0]):
            if n_sel >= target or rejects >= max_rejects:
                break
            used += 1
            x = xi[t]
            lo, hi = 0, n
            while lo < hi:
                mid = (lo + hi) // 2
                if d[mid] < x:
                    lo = mid + 1
                else:
                    hi = mid
            r = _find_nb(nxt, lo + 1) - 1
            l = _find_nb(prv, lo) - 1
            best = -1
            gap = np.inf
            if l >= 0:
                best = l
                gap = x - d[l]
            if r < n:
                g = d[r] - x
                if g < gap:
                    best = r
                    gap = g
            if best < 0 or gap > eps:
                rejects += 1
                continue
            rejects = 0
            out[n_sel] = best
            n_sel += 1
            nxt[best + 1] = best + 2
            prv[best + 1] = best
        return n_sel, rejects, used

else:  # pragma: no cover
    _im2col_nb = _col2im_nb = _splat_nb = _nearest_valid_nb = None
    _balance_nb = _accumulate_windows_nb = None


if USE_NUMBA:
    im2col = _im2col_nb
    col2im = _col2im_nb
    splat = _splat_nb
    nearest_valid = _nearest_valid_nb
    balance_draws = _balance_nb
    accumulate_windows = _accumulate_windows_nb
else:
    im2col = _im2col_np
    col2im = _col2im_np
    splat = _splat_np
    nearest_valid = _nearest_valid_np
    balance_draws = _balance_loop
    accumulate_windows = _accumulate_windows_np
