"""Numba kernels for voxel-field volume rendering and its adjoint.

Parameter layout: flat ``float64`` array indexed by
``((ix * ny + iy) * nz + iz) * 4 + ch`` with channel 0 = raw density and
channels 1..3 = raw RGB.

Per ray the span is ``[t0, t1] = [near, far] ∩ AABB``; sample ``k`` sits at
``t_k = t0 + (t1 - t0) * (k + u_k) / S`` with jitter ``u_k ∈ [0, 1)`` and
interval ``δ_k = t_{k+1} - t_k`` (``t1 - t_{S-1}`` for the last sample).
The backward pass is exact with respect to every input, including the
dependence of ``t0``/``t1`` on the ray through the slab clip. A positive
``trans_stop`` ends a ray once its transmittance drops below it; the
remaining samples then carry zero weight in both passes.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_TINY_DIR = 1e-12


@njit(cache=True)
def _softplus(x):
    if x > 30.0:
        return x
    return math.log1p(math.exp(x))


@njit(cache=True)
def _sigmoid(x):
    if x >= 0.0:
        z = math.exp(-x)
        return 1.0 / (1.0 + z)
    z = math.exp(x)
    return z / (1.0 + z)


@njit(cache=True)
def clip_ray(o, d, lo, hi, near, far, out):
    """Clip a ray to ``[near, far]`` and the box.

    ``out`` receives ``[t0, t1, axis0, bound0, axis1, bound1]``; an axis of
    -1 means the corresponding end came from ``near``/``far``. Returns False
    when the clipped span is empty.
    """
    t_enter = -1e300
    t_exit = 1e300
    a_enter = -1
    a_exit = -1
    b_enter = 0.0
    b_exit = 0.0
    for a in range(3):
        if abs(d[a]) < _TINY_DIR:
            if o[a] < lo[a] or o[a] > hi[a]:
                return False
            continue
        ta = (lo[a] - o[a]) / d[a]
        tb = (hi[a] - o[a]) / d[a]
        if ta <= tb:
            tmin, bmin, tmax, bmax = ta, lo[a], tb, hi[a]
        else:
            tmin, bmin, tmax, bmax = tb, hi[a], ta, lo[a]
        if tmin > t_enter:
            t_enter = tmin
            a_enter = a
            b_enter = bmin
        if tmax < t_exit:
            t_exit = tmax
            a_exit = a
            b_exit = bmax
    if near >= t_enter:
        t0 = near
        a_enter = -1
    else:
        t0 = t_enter
    if far <= t_exit:
        t1 = far
        a_exit = -1
    else:
        t1 = t_exit
    out[0] = t0
    out[1] = t1
    out[2] = a_enter
    out[3] = b_enter
    out[4] = a_exit
    out[5] = b_exit
    return t1 > t0


@njit(cache=True)
def _cell(p, lo, hi, nx, ny, nz, idx, frac, scale, clamped):
    """Grid cell base index, fractional offsets and d(grid)/d(world) per axis."""
    dims = (nx, ny, nz)
    for a in range(3):
        n = dims[a]
        s = (n - 1) / (hi[a] - lo[a])
        g = (p[a] - lo[a]) * s
        c = False
        if g < 0.0:
            g = 0.0
            c = True
        elif g > n - 1:
            g = float(n - 1)
            c = True
        i = int(math.floor(g))
        if i > n - 2:
            i = n - 2
        idx[a] = i
        frac[a] = g - i
        scale[a] = s
        clamped[a] = c


@njit(cache=True)
def _trilinear(params, ny, nz, idx, frac, raw):
    for ch in range(4):
        raw[ch] = 0.0
    for corner in range(8):
        bx = (corner >> 2) & 1
        by = (corner >> 1) & 1
        bz = corner & 1
        wx = frac[0] if bx else 1.0 - frac[0]
        wy = frac[1] if by else 1.0 - frac[1]
        wz = frac[2] if bz else 1.0 - frac[2]
        w = wx * wy * wz
        base = (((idx[0] + bx) * ny + (idx[1] + by)) * nz + (idx[2] + bz)) * 4
        for ch in range(4):
            raw[ch] += w * params[base + ch]


@njit(cache=True)
def sample_points(params, nx, ny, nz, lo, hi, dscale, points, sigma_out, color_out):
    idx = np.empty(3, np.int64)
    frac = np.empty(3)
    scale = np.empty(3)
    clamped = np.empty(3, np.bool_)
    raw = np.empty(4)
    for n in range(points.shape[0]):
        _cell(points[n], lo, hi, nx, ny, nz, idx, frac, scale, clamped)
        _trilinear(params, ny, nz, idx, frac, raw)
        sigma_out[n] = dscale * _softplus(raw[0])
        for c in range(3):
            color_out[n, c] = _sigmoid(raw[1 + c])


@njit(cache=True)
def render_forward(
    params, nx, ny, nz, lo, hi, dscale,
    origins, dirs, jitter, near, far, bg, eps,
    color, depth, wsum, w_out, t_out, keep_samples, trans_stop,
):
    n_rays = origins.shape[0]
    S = jitter.shape[1]
    clip = np.empty(6)
    idx = np.empty(3, np.int64)
    frac = np.empty(3)
    scale = np.empty(3)
    clamped = np.empty(3, np.bool_)
    raw = np.empty(4)
    p = np.empty(3)
    for r in range(n_rays):
        o = origins[r]
        d = dirs[r]
        if keep_samples:
            for k in range(S):
                w_out[r, k] = 0.0
                t_out[r, k] = 0.0
        if not clip_ray(o, d, lo, hi, near[r], far[r], clip):
            for c in range(3):
                color[r, c] = bg[c]
            depth[r] = 0.0
            wsum[r] = 0.0
            continue
        t0 = clip[0]
        t1 = clip[1]
        L = t1 - t0
        trans = 1.0
        W = 0.0
        A = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        t_k = t0 + L * jitter[r, 0] / S
        for k in range(S):
            if k < S - 1:
                t_next = t0 + L * (k + 1 + jitter[r, k + 1]) / S
            else:
                t_next = t1
            delta = t_next - t_k
            for a in range(3):
                p[a] = o[a] + t_k * d[a]
            _cell(p, lo, hi, nx, ny, nz, idx, frac, scale, clamped)
            _trilinear(params, ny, nz, idx, frac, raw)
            sigma = dscale * _softplus(raw[0])
            tau = sigma * delta
            e = math.exp(-tau)
            w = trans * (1.0 - e)
            c0 += w * _sigmoid(raw[1])
            c1 += w * _sigmoid(raw[2])
            c2 += w * _sigmoid(raw[3])
            W += w
            A += w * t_k
            if keep_samples:
                w_out[r, k] = w
                t_out[r, k] = t_k
            trans *= e
            t_k = t_next
            if trans < trans_stop:
                break
        color[r, 0] = c0 + (1.0 - W) * bg[0]
        color[r, 1] = c1 + (1.0 - W) * bg[1]
        color[r, 2] = c2 + (1.0 - W) * bg[2]
        wsum[r] = W
        depth[r] = A / max(W, eps)


@njit(cache=True)
def render_backward(
    params, nx, ny, nz, lo, hi, dscale,
    origins, dirs, jitter, near, far, bg, eps,
    g_color, g_depth, g_wsum,
    grad_params, want_params, g_origin, g_dir, trans_stop,
):
    """Accumulate parameter gradients into ``grad_params`` (when
    ``want_params``) and write per-ray origin/direction gradients."""
    n_rays = origins.shape[0]
    S = jitter.shape[1]
    clip = np.empty(6)
    idx = np.empty(3, np.int64)
    frac = np.empty(3)
    scale = np.empty(3)
    clamped = np.empty(3, np.bool_)
    raw = np.empty(4)
    p = np.empty(3)
    ts = np.empty(S)
    fk = np.empty(S)
    deltas = np.empty(S)
    sig = np.empty(S)
    rawd = np.empty(S)
    col = np.empty((S, 3))
    ws = np.empty(S)
    Tk = np.empty(S + 1)
    gw = np.empty(S)
    gt = np.empty(S)
    cidx = np.empty((S, 3), np.int64)
    cfrac = np.empty((S, 3))
    cscale = np.empty((S, 3))
    cclamp = np.empty((S, 3), np.bool_)
    graw = np.empty(4)
    for r in range(n_rays):
        o = origins[r]
        d = dirs[r]
        for a in range(3):
            g_origin[r, a] = 0.0
            g_dir[r, a] = 0.0
        if not clip_ray(o, d, lo, hi, near[r], far[r], clip):
            continue
        t0 = clip[0]
        t1 = clip[1]
        L = t1 - t0
        for k in range(S):
            fk[k] = (k + jitter[r, k]) / S
            ts[k] = t0 + L * fk[k]
        for k in range(S):
            if k < S - 1:
                deltas[k] = ts[k + 1] - ts[k]
            else:
                deltas[k] = t1 - ts[k]
        # forward recompute
        Tk[0] = 1.0
        W = 0.0
        A = 0.0
        K = S
        for k in range(S):
            for a in range(3):
                p[a] = o[a] + ts[k] * d[a]
            _cell(p, lo, hi, nx, ny, nz, idx, frac, scale, clamped)
            for a in range(3):
                cidx[k, a] = idx[a]
                cfrac[k, a] = frac[a]
                cscale[k, a] = scale[a]
                cclamp[k, a] = clamped[a]
            _trilinear(params, ny, nz, idx, frac, raw)
            rawd[k] = raw[0]
            sig[k] = dscale * _softplus(raw[0])
            for c in range(3):
                col[k, c] = _sigmoid(raw[1 + c])
            e = math.exp(-sig[k] * deltas[k])
            ws[k] = Tk[k] * (1.0 - e)
            Tk[k + 1] = Tk[k] * e
            W += ws[k]
            A += ws[k] * ts[k]
            if Tk[k + 1] < trans_stop:
                K = k + 1
                break
        Wc = max(W, eps)
        above = W > eps
        gC0 = g_color[r, 0]
        gC1 = g_color[r, 1]
        gC2 = g_color[r, 2]
        gD = g_depth[r]
        for k in range(S):
            gt[k] = 0.0
        for k in range(K):
            dDdw = ts[k] / Wc
            if above:
                dDdw -= A / (Wc * Wc)
            gw[k] = (
                gC0 * (col[k, 0] - bg[0])
                + gC1 * (col[k, 1] - bg[1])
                + gC2 * (col[k, 2] - bg[2])
                + gD * dDdw
                + g_wsum[r]
            )
            gt[k] = gD * ws[k] / Wc
        # reverse scan: dL/dtau_k = gw_k T_{k+1} - sum_{m>k} gw_m w_m
        suffix = 0.0
        gt1_extra = 0.0
        for k in range(K - 1, -1, -1):
            gtau = gw[k] * Tk[k + 1] - suffix
            suffix += gw[k] * ws[k]
            gsigma = gtau * deltas[k]
            gdelta = gtau * sig[k]
            if k < S - 1:
                gt[k + 1] += gdelta
            else:
                gt1_extra += gdelta
            gt[k] -= gdelta
            graw[0] = gsigma * dscale * _sigmoid(rawd[k])
            for c in range(3):
                gcol = g_color[r, c] * ws[k]
                graw[1 + c] = gcol * col[k, c] * (1.0 - col[k, c])
            # scatter to vertices and accumulate d(raw)/d(grid position)
            fx = cfrac[k, 0]
            fy = cfrac[k, 1]
            fz = cfrac[k, 2]
            gpx = 0.0
            gpy = 0.0
            gpz = 0.0
            for corner in range(8):
                bx = (corner >> 2) & 1
                by = (corner >> 1) & 1
                bz = corner & 1
                wx = fx if bx else 1.0 - fx
                wy = fy if by else 1.0 - fy
                wz = fz if bz else 1.0 - fz
                dwx = 1.0 if bx else -1.0
                dwy = 1.0 if by else -1.0
                dwz = 1.0 if bz else -1.0
                base = (((cidx[k, 0] + bx) * ny + (cidx[k, 1] + by)) * nz + (cidx[k, 2] + bz)) * 4
                s = 0.0
                for ch in range(4):
                    s += graw[ch] * params[base + ch]
                    if want_params:
                        grad_params[base + ch] += wx * wy * wz * graw[ch]
                gpx += dwx * wy * wz * s
                gpy += wx * dwy * wz * s
                gpz += wx * wy * dwz * s
            gp0 = 0.0 if cclamp[k, 0] else gpx * cscale[k, 0]
            gp1 = 0.0 if cclamp[k, 1] else gpy * cscale[k, 1]
            gp2 = 0.0 if cclamp[k, 2] else gpz * cscale[k, 2]
            g_origin[r, 0] += gp0
            g_origin[r, 1] += gp1
            g_origin[r, 2] += gp2
            g_dir[r, 0] += ts[k] * gp0
            g_dir[r, 1] += ts[k] * gp1
            g_dir[r, 2] += ts[k] * gp2
            gt[k] += gp0 * d[0] + gp1 * d[1] + gp2 * d[2]
        gt0 = 0.0
        gt1 = gt1_extra
        for k in range(S):
            gt0 += (1.0 - fk[k]) * gt[k]
            gt1 += fk[k] * gt[k]
        # chain span ends through the slab clip: t = (b - o_a) / d_a
        a0 = int(clip[2])
        if a0 >= 0:
            g_origin[r, a0] += -gt0 / d[a0]
            g_dir[r, a0] += -gt0 * t0 / d[a0]
        a1 = int(clip[4])
        if a1 >= 0:
            g_origin[r, a1] += -gt1 / d[a1]
            g_dir[r, a1] += -gt1 * t1 / d[a1]


@njit(cache=True)
def adam_update(params, grad, m, v, lr, beta1, beta2, eps, step):
    """Lazy Adam: only entries with a non-zero gradient are touched."""
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    for i in range(params.shape[0]):
        g = grad[i]
        if g == 0.0:
            continue
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        params[i] -= lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)


@njit(cache=True)
def _mark(flags, n, lo, hi, p):
    ix = int(math.floor((p[0] - lo[0]) / (hi[0] - lo[0]) * n))
    iy = int(math.floor((p[1] - lo[1]) / (hi[1] - lo[1]) * n))
    iz = int(math.floor((p[2] - lo[2]) / (hi[2] - lo[2]) * n))
    if 0 <= ix < n and 0 <= iy < n and 0 <= iz < n:
        flags[(ix * n + iy) * n + iz] = True


@njit(cache=True)
def dda_mark(flags, n, lo, hi, o, d, t_start, t_end):
    """Mark every cell of an ``n``³ grid crossed by ``o + t d`` for
    ``t ∈ [t_start, t_end]`` (Amanatides-Woo traversal)."""
    if t_end <= t_start:
        return
    cell = np.empty(3)
    idx = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    tmax = np.empty(3)
    tdelta = np.empty(3)
    for a in range(3):
        cell[a] = (hi[a] - lo[a]) / n
        pa = o[a] + t_start * d[a]
        i = int(math.floor((pa - lo[a]) / cell[a]))
        if i < 0:
            i = 0
        if i > n - 1:
            i = n - 1
        idx[a] = i
        if d[a] > _TINY_DIR:
            step[a] = 1
            tmax[a] = (lo[a] + (i + 1) * cell[a] - o[a]) / d[a]
            tdelta[a] = cell[a] / d[a]
        elif d[a] < -_TINY_DIR:
            step[a] = -1
            tmax[a] = (lo[a] + i * cell[a] - o[a]) / d[a]
            tdelta[a] = -cell[a] / d[a]
        else:
            step[a] = 0
            tmax[a] = 1e300
            tdelta[a] = 1e300
    while True:
        if idx[0] < 0 or idx[0] >= n or idx[1] < 0 or idx[1] >= n or idx[2] < 0 or idx[2] >= n:
            return
        flags[(idx[0] * n + idx[1]) * n + idx[2]] = True
        a = 0
        if tmax[1] < tmax[a]:
            a = 1
        if tmax[2] < tmax[a]:
            a = 2
        if tmax[a] >= t_end:
            return
        idx[a] += step[a]
        tmax[a] += tdelta[a]


@njit(cache=True)
def fill_grid(flags, n, lo, hi, origins, dirs, near, far, weights, ts, depth, wsum, w_min, w_term):
    """Mark sample cells with weight above ``w_min`` and the cells traversed
    up to the rendered depth for rays whose weight sum reaches ``w_term``."""
    clip = np.empty(6)
    p = np.empty(3)
    for r in range(origins.shape[0]):
        o = origins[r]
        d = dirs[r]
        for k in range(weights.shape[1]):
            if weights[r, k] > w_min:
                for a in range(3):
                    p[a] = o[a] + ts[r, k] * d[a]
                _mark(flags, n, lo, hi, p)
        if wsum[r] >= w_term:
            if clip_ray(o, d, lo, hi, near[r], far[r], clip):
                t_stop = min(depth[r], clip[1])
                dda_mark(flags, n, lo, hi, o, d, clip[0], t_stop)


@njit(cache=True)
def probe_fraction(flags, n, lo, hi, origins, dirs, near, far, n_probe, out):
    """Fraction of ``n_probe`` evenly spaced probes on each clipped ray that
    land in marked cells (-1 for rays missing the box)."""
    clip = np.empty(6)
    p = np.empty(3)
    ii = np.empty(3, np.int64)
    for r in range(origins.shape[0]):
        if not clip_ray(origins[r], dirs[r], lo, hi, near[r], far[r], clip):
            out[r] = -1.0
            continue
        cnt = 0
        for k in range(n_probe):
            t = clip[0] + (clip[1] - clip[0]) * (k + 0.5) / n_probe
            inside = True
            for a in range(3):
                p[a] = origins[r, a] + t * dirs[r, a]
                i = int(math.floor((p[a] - lo[a]) / (hi[a] - lo[a]) * n))
                if i == n:
                    i = n - 1
                if i < 0 or i >= n:
                    inside = False
                ii[a] = i
            if inside and flags[(ii[0] * n + ii[1]) * n + ii[2]]:
                cnt += 1
        out[r] = cnt / n_probe
