"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Three kernel families live here:

* ``matmul`` — serial f64 matrix product. The numba variant accumulates in a
  fixed ikj order so results do not depend on BLAS threading.
* ``conv3d_*`` — 3x3x3 zero-padded convolution over an (X, Y, Z, C) volume,
  forward plus both backward passes.
* ``blend_*`` — front-to-back alpha blending of projected Gaussians into
  color/depth/feature/transmittance images, forward and backward.

Blending semantics (identical in both backends): Gaussians are processed per
pixel in ascending camera-depth order; ``alpha = min(0.99, opacity * g)``
with ``g = exp(-0.5 d^T conic d)``; contributions with ``alpha < cutoff`` are
skipped; a pixel stops blending once its transmittance drops below
``t_floor``. Each Gaussian is only evaluated inside a per-Gaussian radius
chosen so that every skipped pixel is guaranteed to fail the alpha cutoff,
which makes the tiled result equal to an exhaustive per-pixel loop.
"""

import math

import numpy as np

from .backend import HAS_NUMBA, use_numba

if HAS_NUMBA:
    from numba import njit
else:  # pragma: no cover - numba is a declared dependency
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


# ---------------------------------------------------------------------------
# matmul


@njit(cache=True)
def _matmul_nb(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            for j in range(m):
                out[i, j] += aip * b[p, j]
    return out


def matmul(a, b):
    """2-D f64 matrix product on the selected backend."""
    if use_numba():
        return _matmul_nb(np.ascontiguousarray(a), np.ascontiguousarray(b))
    return a @ b


# ---------------------------------------------------------------------------
# 3x3x3 convolution (zero padded, stride 1)


def pad_volume(vol):
    """Zero-pad the three spatial axes of an (X, Y, Z, C) volume by one."""
    return np.pad(vol, ((1, 1), (1, 1), (1, 1), (0, 0)))


@njit(cache=True)
def _conv3d_forward_nb(vp, w, b):
    xs = vp.shape[0] - 2
    ys = vp.shape[1] - 2
    zs = vp.shape[2] - 2
    ci = vp.shape[3]
    co = w.shape[4]
    out = np.empty((xs, ys, zs, co))
    for x in range(xs):
        for y in range(ys):
            for z in range(zs):
                for oc in range(co):
                    out[x, y, z, oc] = b[oc]
                for dx in range(3):
                    for dy in range(3):
                        for dz in range(3):
                            for ic in range(ci):
                                v = vp[x + dx, y + dy, z + dz, ic]
                                if v != 0.0:
                                    for oc in range(co):
                                        out[x, y, z, oc] += v * w[dx, dy, dz, ic, oc]
    return out


@njit(cache=True)
def _conv3d_backward_input_nb(dout, w):
    xs, ys, zs, co = dout.shape
    ci = w.shape[3]
    dvp = np.zeros((xs + 2, ys + 2, zs + 2, ci))
    for x in range(xs):
        for y in range(ys):
            for z in range(zs):
                for dx in range(3):
                    for dy in range(3):
                        for dz in range(3):
                            for ic in range(ci):
                                acc = 0.0
                                for oc in range(co):
                                    acc += dout[x, y, z, oc] * w[dx, dy, dz, ic, oc]
                                dvp[x + dx, y + dy, z + dz, ic] += acc
    return dvp


@njit(cache=True)
def _conv3d_backward_weights_nb(vp, dout):
    xs, ys, zs, co = dout.shape
    ci = vp.shape[3]
    dw = np.zeros((3, 3, 3, ci, co))
    for x in range(xs):
        for y in range(ys):
            for z in range(zs):
                for dx in range(3):
                    for dy in range(3):
                        for dz in range(3):
                            for ic in range(ci):
                                v = vp[x + dx, y + dy, z + dz, ic]
                                if v != 0.0:
                                    for oc in range(co):
                                        dw[dx, dy, dz, ic, oc] += v * dout[x, y, z, oc]
    return dw


def _tap_slices(shape):
    xs, ys, zs = shape
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                yield (dx, dy, dz), np.s_[dx : dx + xs, dy : dy + ys, dz : dz + zs]


def conv3d_forward(vol, w, b):
    """Convolve an (X, Y, Z, Cin) volume with a (3, 3, 3, Cin, Cout) kernel."""
    vp = pad_volume(vol)
    if use_numba():
        return _conv3d_forward_nb(vp, w, b)
    xs, ys, zs, _ = vol.shape
    co = w.shape[4]
    out = np.tile(b, (xs, ys, zs, 1))
    for (dx, dy, dz), sl in _tap_slices((xs, ys, zs)):
        patch = vp[sl].reshape(-1, vol.shape[3])
        out += (patch @ w[dx, dy, dz]).reshape(xs, ys, zs, co)
    return out


def conv3d_backward(vol, w, dout):
    """Gradients (dvol, dw, db) of conv3d_forward for upstream grad dout."""
    vp = pad_volume(vol)
    db = dout.sum(axis=(0, 1, 2))
    if use_numba():
        dvp = _conv3d_backward_input_nb(dout, w)
        dw = _conv3d_backward_weights_nb(vp, dout)
    else:
        xs, ys, zs, co = dout.shape
        ci = vol.shape[3]
        dvp = np.zeros_like(vp)
        dw = np.empty((3, 3, 3, ci, co))
        dflat = dout.reshape(-1, co)
        for (dx, dy, dz), sl in _tap_slices((xs, ys, zs)):
            dvp[sl] += (dflat @ w[dx, dy, dz].T).reshape(xs, ys, zs, ci)
            dw[dx, dy, dz] = vp[sl].reshape(-1, ci).T @ dflat
    return dvp[1:-1, 1:-1, 1:-1, :], dw, db


# ---------------------------------------------------------------------------
# alpha blending


def footprint_radii(con_a, con_b, con_c, opacity, alpha_cutoff, width, height):
    """Per-Gaussian pixel radius beyond which alpha is strictly below cutoff.

    Takes the packed conic (inverse 2D covariance); the bound is
    alpha <= opacity * exp(-r^2 / (2 lam_max)) with lam_max the largest
    covariance eigenvalue, i.e. the reciprocal of the smallest conic
    eigenvalue. A zero/negative cutoff yields the image diagonal (every
    pixel is evaluated).
    """
    cap = math.hypot(width, height) + 2.0
    if alpha_cutoff <= 0.0:
        return np.full(con_a.shape, cap)
    half = 0.5 * (con_a + con_c)
    mu_min = half - np.sqrt(np.square(0.5 * (con_a - con_c)) + np.square(con_b))
    lam_max = 1.0 / np.maximum(mu_min, 1e-12)
    # 1e-3 slack keeps the bound strict under float rounding.
    ln_term = np.log(np.maximum(opacity, 1e-300) / alpha_cutoff)
    r = np.sqrt(2.0 * lam_max * (np.maximum(ln_term, 0.0) + 1e-3))
    return np.minimum(r, cap)


def depth_order(z_cam):
    """Ascending camera-depth order, stable in the original index."""
    return np.argsort(z_cam, kind="stable")


def build_tile_lists(mx, my, radii, order, width, height, tile):
    """Bin Gaussians (given in blend order) into 2-D screen tiles.

    Returns ``(flat, tile_start, tiles_x, tiles_y)`` where
    ``flat[tile_start[t]:tile_start[t+1]]`` lists the Gaussian indices whose
    footprint box touches tile ``t``, in blend order.
    """
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    ntiles = tiles_x * tiles_y
    tx0 = np.clip(np.floor((mx - radii) / tile).astype(np.int64), 0, tiles_x - 1)
    tx1 = np.clip(np.floor((mx + radii) / tile).astype(np.int64), 0, tiles_x - 1)
    ty0 = np.clip(np.floor((my - radii) / tile).astype(np.int64), 0, tiles_y - 1)
    ty1 = np.clip(np.floor((my + radii) / tile).astype(np.int64), 0, tiles_y - 1)
    counts = np.zeros(ntiles, dtype=np.int64)
    for i in order:
        for ty in range(ty0[i], ty1[i] + 1):
            counts[ty * tiles_x + tx0[i] : ty * tiles_x + tx1[i] + 1] += 1
    tile_start = np.zeros(ntiles + 1, dtype=np.int64)
    np.cumsum(counts, out=tile_start[1:])
    flat = np.empty(tile_start[-1], dtype=np.int64)
    cursor = tile_start[:-1].copy()
    for i in order:
        for ty in range(ty0[i], ty1[i] + 1):
            base = ty * tiles_x
            for tx in range(tx0[i], tx1[i] + 1):
                t = base + tx
                flat[cursor[t]] = i
                cursor[t] += 1
    return flat, tile_start, tiles_x, tiles_y


@njit(cache=True)
def _blend_forward_nb(mx, my, ca, cb, cc, zc, col, opa, feat, flat, tile_start,
                      tiles_x, tiles_y, tile, width, height, bg, cutoff, t_floor):
    nf = feat.shape[1]
    color = np.empty((height, width, 3))
    depth = np.zeros((height, width))
    fmap = np.zeros((height, width, nf))
    trans = np.ones((height, width))
    facc = np.empty(nf)
    for ty in range(tiles_y):
        y_end = min((ty + 1) * tile, height)
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            s, e = tile_start[t], tile_start[t + 1]
            x_end = min((tx + 1) * tile, width)
            for py in range(ty * tile, y_end):
                for px in range(tx * tile, x_end):
                    tcur = 1.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    d = 0.0
                    for f in range(nf):
                        facc[f] = 0.0
                    for k in range(s, e):
                        if tcur < t_floor:
                            break
                        i = flat[k]
                        dx = px - mx[i]
                        dy = py - my[i]
                        power = -0.5 * (ca[i] * dx * dx + cc[i] * dy * dy) - cb[i] * dx * dy
                        if power > 0.0:
                            power = 0.0
                        alpha = opa[i] * math.exp(power)
                        if alpha > 0.99:
                            alpha = 0.99
                        if alpha < cutoff:
                            continue
                        w = alpha * tcur
                        c0 += col[i, 0] * w
                        c1 += col[i, 1] * w
                        c2 += col[i, 2] * w
                        d += zc[i] * w
                        for f in range(nf):
                            facc[f] += feat[i, f] * w
                        tcur *= 1.0 - alpha
                    color[py, px, 0] = c0 + tcur * bg[0]
                    color[py, px, 1] = c1 + tcur * bg[1]
                    color[py, px, 2] = c2 + tcur * bg[2]
                    depth[py, px] = d
                    for f in range(nf):
                        fmap[py, px, f] = facc[f]
                    trans[py, px] = tcur
    return color, depth, fmap, trans


@njit(cache=True)
def _blend_backward_nb(mx, my, ca, cb, cc, zc, col, opa, feat, flat, tile_start,
                       tiles_x, tiles_y, tile, width, height, bg, cutoff, t_floor,
                       dcolor, ddepth, dfeat, dtrans):
    n = mx.shape[0]
    nf = feat.shape[1]
    dmx = np.zeros(n)
    dmy = np.zeros(n)
    dca = np.zeros(n)
    dcb = np.zeros(n)
    dcc = np.zeros(n)
    dzc = np.zeros(n)
    dcol = np.zeros((n, 3))
    dopa = np.zeros(n)
    dfe = np.zeros((n, nf))
    sf = np.empty(nf)
    for ty in range(tiles_y):
        y_end = min((ty + 1) * tile, height)
        for tx in range(tiles_x):
            t = ty * tiles_x + tx
            s, e = tile_start[t], tile_start[t + 1]
            if s == e:
                continue
            cap = e - s
            a_buf = np.empty(cap)
            g_buf = np.empty(cap)
            t_buf = np.empty(cap)
            i_buf = np.empty(cap, dtype=np.int64)
            x_end = min((tx + 1) * tile, width)
            for py in range(ty * tile, y_end):
                for px in range(tx * tile, x_end):
                    # replay the forward blend for this pixel
                    tcur = 1.0
                    m = 0
                    for k in range(s, e):
                        if tcur < t_floor:
                            break
                        i = flat[k]
                        dx = px - mx[i]
                        dy = py - my[i]
                        power = -0.5 * (ca[i] * dx * dx + cc[i] * dy * dy) - cb[i] * dx * dy
                        if power > 0.0:
                            power = 0.0
                        g = math.exp(power)
                        alpha = opa[i] * g
                        if alpha > 0.99:
                            alpha = 0.99
                        if alpha < cutoff:
                            continue
                        a_buf[m] = alpha
                        g_buf[m] = g
                        t_buf[m] = tcur
                        i_buf[m] = i
                        m += 1
                        tcur *= 1.0 - alpha
                    t_final = tcur
                    g0 = dcolor[py, px, 0]
                    g1 = dcolor[py, px, 1]
                    g2 = dcolor[py, px, 2]
                    gd = ddepth[py, px]
                    gt = dtrans[py, px] + g0 * bg[0] + g1 * bg[1] + g2 * bg[2]
                    s0 = 0.0
                    s1 = 0.0
                    s2 = 0.0
                    sz = 0.0
                    for f in range(nf):
                        sf[f] = 0.0
                    for r in range(m - 1, -1, -1):
                        i = i_buf[r]
                        alpha = a_buf[r]
                        tb = t_buf[r]
                        w = alpha * tb
                        one_m = 1.0 - alpha
                        dcol[i, 0] += g0 * w
                        dcol[i, 1] += g1 * w
                        dcol[i, 2] += g2 * w
                        dzc[i] += gd * w
                        dalpha = (g0 * (col[i, 0] * tb - s0 / one_m)
                                  + g1 * (col[i, 1] * tb - s1 / one_m)
                                  + g2 * (col[i, 2] * tb - s2 / one_m)
                                  + gd * (zc[i] * tb - sz / one_m)
                                  - gt * t_final / one_m)
                        for f in range(nf):
                            gf = dfeat[py, px, f]
                            dfe[i, f] += gf * w
                            dalpha += gf * (feat[i, f] * tb - sf[f] / one_m)
                        g = g_buf[r]
                        if opa[i] * g < 0.99:  # clamp inactive
                            dopa[i] += dalpha * g
                            dpower = dalpha * alpha
                            dx = px - mx[i]
                            dy = py - my[i]
                            dca[i] += dpower * (-0.5 * dx * dx)
                            dcb[i] += dpower * (-dx * dy)
                            dcc[i] += dpower * (-0.5 * dy * dy)
                            dmx[i] += dpower * (ca[i] * dx + cb[i] * dy)
                            dmy[i] += dpower * (cc[i] * dy + cb[i] * dx)
                        s0 += col[i, 0] * w
                        s1 += col[i, 1] * w
                        s2 += col[i, 2] * w
                        sz += zc[i] * w
                        for f in range(nf):
                            sf[f] += feat[i, f] * w
    return dmx, dmy, dca, dcb, dcc, dzc, dcol, dopa, dfe


def _rect(mx, my, radius, width, height):
    x0 = max(0, int(math.ceil(mx - radius)))
    x1 = min(width - 1, int(math.floor(mx + radius)))
    y0 = max(0, int(math.ceil(my - radius)))
    y1 = min(height - 1, int(math.floor(my + radius)))
    return x0, x1, y0, y1


def _rect_alpha(mx, my, ca, cb, cc, opa, x0, x1, y0, y1):
    dx = np.arange(x0, x1 + 1, dtype=np.float64) - mx
    dy = np.arange(y0, y1 + 1, dtype=np.float64) - my
    dxg = dx[None, :]
    dyg = dy[:, None]
    power = -0.5 * (ca * dxg * dxg + cc * dyg * dyg) - cb * dxg * dyg
    g = np.exp(np.minimum(power, 0.0))
    return np.minimum(opa * g, 0.99), g, dxg, dyg


def _blend_forward_np(mx, my, ca, cb, cc, zc, col, opa, feat, radii, order,
                      width, height, bg, cutoff, t_floor):
    nf = feat.shape[1]
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    fmap = np.zeros((height, width, nf))
    trans = np.ones((height, width))
    for i in order:
        x0, x1, y0, y1 = _rect(mx[i], my[i], radii[i], width, height)
        if x0 > x1 or y0 > y1:
            continue
        sl = np.s_[y0 : y1 + 1, x0 : x1 + 1]
        alpha, _, _, _ = _rect_alpha(mx[i], my[i], ca[i], cb[i], cc[i], opa[i], x0, x1, y0, y1)
        eff = (trans[sl] >= t_floor) & (alpha >= cutoff)
        w = np.where(eff, alpha * trans[sl], 0.0)
        color[sl] += w[..., None] * col[i]
        depth[sl] += w * zc[i]
        fmap[sl] += w[..., None] * feat[i]
        trans[sl] = np.where(eff, trans[sl] * (1.0 - alpha), trans[sl])
    color += trans[..., None] * bg
    return color, depth, fmap, trans


def _blend_backward_np(mx, my, ca, cb, cc, zc, col, opa, feat, radii, order,
                       width, height, bg, cutoff, t_floor,
                       dcolor, ddepth, dfeat, dtrans):
    n = mx.shape[0]
    nf = feat.shape[1]
    # replay the forward pass, keeping per-Gaussian pixel records
    trans = np.ones((height, width))
    recs = []
    for i in order:
        x0, x1, y0, y1 = _rect(mx[i], my[i], radii[i], width, height)
        if x0 > x1 or y0 > y1:
            continue
        sl = np.s_[y0 : y1 + 1, x0 : x1 + 1]
        alpha, g, dxg, dyg = _rect_alpha(mx[i], my[i], ca[i], cb[i], cc[i], opa[i], x0, x1, y0, y1)
        eff = (trans[sl] >= t_floor) & (alpha >= cutoff)
        recs.append((i, sl, alpha, g, dxg, dyg, trans[sl].copy(), eff))
        trans[sl] = np.where(eff, trans[sl] * (1.0 - alpha), trans[sl])
    t_final = trans
    gt = dtrans + dcolor @ bg
    dmx = np.zeros(n)
    dmy = np.zeros(n)
    dca = np.zeros(n)
    dcb = np.zeros(n)
    dcc = np.zeros(n)
    dzc = np.zeros(n)
    dcol = np.zeros((n, 3))
    dopa = np.zeros(n)
    dfe = np.zeros((n, nf))
    s_col = np.zeros((height, width, 3))
    s_z = np.zeros((height, width))
    s_f = np.zeros((height, width, nf))
    for i, sl, alpha, g, dxg, dyg, tb, eff in reversed(recs):
        w = np.where(eff, alpha * tb, 0.0)
        one_m = 1.0 - alpha
        dcol[i] += np.einsum("yxc,yx->c", dcolor[sl], w)
        dzc[i] += float((ddepth[sl] * w).sum())
        dfe[i] += np.einsum("yxf,yx->f", dfeat[sl], w)
        dalpha = np.einsum("yxc,yxc->yx", dcolor[sl], col[i] * tb[..., None] - s_col[sl] / one_m[..., None])
        dalpha += ddepth[sl] * (zc[i] * tb - s_z[sl] / one_m)
        dalpha += np.einsum("yxf,yxf->yx", dfeat[sl], feat[i] * tb[..., None] - s_f[sl] / one_m[..., None])
        dalpha -= gt[sl] * t_final[sl] / one_m
        dalpha = np.where(eff & (opa[i] * g < 0.99), dalpha, 0.0)
        dopa[i] += float((dalpha * g).sum())
        dpower = dalpha * alpha
        dca[i] += float((dpower * (-0.5 * dxg * dxg)).sum())
        dcb[i] += float((dpower * (-dxg * dyg)).sum())
        dcc[i] += float((dpower * (-0.5 * dyg * dyg)).sum())
        dmx[i] += float((dpower * (ca[i] * dxg + cb[i] * dyg)).sum())
        dmy[i] += float((dpower * (cc[i] * dyg + cb[i] * dxg)).sum())
        s_col[sl] += w[..., None] * col[i]
        s_z[sl] += w * zc[i]
        s_f[sl] += w[..., None] * feat[i]
    return dmx, dmy, dca, dcb, dcc, dzc, dcol, dopa, dfe


class BlendPlan:
    """Precomputed blend order and screen binning, shared by fwd/bwd."""

    def __init__(self, mx, my, ca, cb, cc, zc, opa, width, height, tile, alpha_cutoff):
        self.width = int(width)
        self.height = int(height)
        self.tile = int(tile)
        self.order = depth_order(zc)
        self.radii = footprint_radii(ca, cb, cc, opa, alpha_cutoff, width, height)
        self.flat, self.tile_start, self.tiles_x, self.tiles_y = build_tile_lists(
            mx, my, self.radii, self.order, self.width, self.height, self.tile
        )


def blend_forward(attrs, plan, bg, cutoff, t_floor):
    mx, my, ca, cb, cc, zc, col, opa, feat = attrs
    if use_numba():
        return _blend_forward_nb(mx, my, ca, cb, cc, zc, col, opa, feat,
                                 plan.flat, plan.tile_start, plan.tiles_x, plan.tiles_y,
                                 plan.tile, plan.width, plan.height, bg, cutoff, t_floor)
    return _blend_forward_np(mx, my, ca, cb, cc, zc, col, opa, feat,
                             plan.radii, plan.order, plan.width, plan.height,
                             bg, cutoff, t_floor)


def blend_backward(attrs, plan, bg, cutoff, t_floor, dcolor, ddepth, dfeat, dtrans):
    mx, my, ca, cb, cc, zc, col, opa, feat = attrs
    if use_numba():
        return _blend_backward_nb(mx, my, ca, cb, cc, zc, col, opa, feat,
                                  plan.flat, plan.tile_start, plan.tiles_x, plan.tiles_y,
                                  plan.tile, plan.width, plan.height, bg, cutoff, t_floor,
                                  dcolor, ddepth, dfeat, dtrans)
    return _blend_backward_np(mx, my, ca, cb, cc, zc, col, opa, feat,
                              plan.radii, plan.order, plan.width, plan.height,
                              bg, cutoff, t_floor, dcolor, ddepth, dfeat, dtrans)
