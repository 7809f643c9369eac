"""Numba-compiled inner loops for convolution and trilinear sampling.

All kernels are single threaded and write into caller-allocated output
buffers, so loop order (and therefore floating-point accumulation order)
is fixed and results are reproducible run to run.

Convolution kernels use fastmath; the interpolation kernels deliberately
do not, because warp/compose/resize promise exact identities (zero field
is the identity warp, constants survive resampling) that reassociation
could break.  Interpolation uses the form ``v0 + (v1 - v0) * f`` with
``f`` in [0, 1): at integer sample coordinates f is exactly 0 and the
corner value is returned bitwise.

Kernels are dtype-generic: numba specializes on the argument dtypes, so
the same code serves the float32 production path and the float64
reference path used by gradient checks.

Displacement fields are arrays of shape (3, Z, Y, X) with channel 0
displacing x (the fastest axis), channel 1 y, channel 2 z.
"""

from __future__ import annotations

import numpy as np
from numba import njit

# --------------------------------------------------------------------------
# convolution, kernel 3x3x3
# --------------------------------------------------------------------------


@njit(cache=True, fastmath=True)
def conv3_fwd_k3_s1(xp, w, out):
    # xp: (Ci, Z+2, Y+2, X+2) zero padded, w: (Co, Ci, 3, 3, 3), out: (Co, Z, Y, X)
    co_n, zn, yn, xn = out.shape
    ci_n = xp.shape[0]
    for co in range(co_n):
        for ci in range(ci_n):
            wl = w[co, ci]
            w000 = wl[0, 0, 0]; w001 = wl[0, 0, 1]; w002 = wl[0, 0, 2]
            w010 = wl[0, 1, 0]; w011 = wl[0, 1, 1]; w012 = wl[0, 1, 2]
            w020 = wl[0, 2, 0]; w021 = wl[0, 2, 1]; w022 = wl[0, 2, 2]
            w100 = wl[1, 0, 0]; w101 = wl[1, 0, 1]; w102 = wl[1, 0, 2]
            w110 = wl[1, 1, 0]; w111 = wl[1, 1, 1]; w112 = wl[1, 1, 2]
            w120 = wl[1, 2, 0]; w121 = wl[1, 2, 1]; w122 = wl[1, 2, 2]
            w200 = wl[2, 0, 0]; w201 = wl[2, 0, 1]; w202 = wl[2, 0, 2]
            w210 = wl[2, 1, 0]; w211 = wl[2, 1, 1]; w212 = wl[2, 1, 2]
            w220 = wl[2, 2, 0]; w221 = wl[2, 2, 1]; w222 = wl[2, 2, 2]
            for z in range(zn):
                for y in range(yn):
                    r00 = xp[ci, z, y]; r01 = xp[ci, z, y + 1]; r02 = xp[ci, z, y + 2]
                    r10 = xp[ci, z + 1, y]; r11 = xp[ci, z + 1, y + 1]; r12 = xp[ci, z + 1, y + 2]
                    r20 = xp[ci, z + 2, y]; r21 = xp[ci, z + 2, y + 1]; r22 = xp[ci, z + 2, y + 2]
                    o = out[co, z, y]
                    for x in range(xn):
                        acc = (w000 * r00[x] + w001 * r00[x + 1] + w002 * r00[x + 2]
                               + w010 * r01[x] + w011 * r01[x + 1] + w012 * r01[x + 2]
                               + w020 * r02[x] + w021 * r02[x + 1] + w022 * r02[x + 2]
                               + w100 * r10[x] + w101 * r10[x + 1] + w102 * r10[x + 2]
                               + w110 * r11[x] + w111 * r11[x + 1] + w112 * r11[x + 2]
                               + w120 * r12[x] + w121 * r12[x + 1] + w122 * r12[x + 2]
                               + w200 * r20[x] + w201 * r20[x + 1] + w202 * r20[x + 2]
                               + w210 * r21[x] + w211 * r21[x + 1] + w212 * r21[x + 2]
                               + w220 * r22[x] + w221 * r22[x + 1] + w222 * r22[x + 2])
                        if ci == 0:
                            o[x] = acc
                        else:
                            o[x] += acc


@njit(cache=True, fastmath=True)
def conv3_fwd_k3_s2(xp, w, out):
    # stride 2: out[co, z, y, x] taps xp[ci, 2z+dz, 2y+dy, 2x+dx]
    # caller must pass a zero-initialized out buffer
    co_n, zn, yn, xn = out.shape
    ci_n = xp.shape[0]
    for co in range(co_n):
        for ci in range(ci_n):
            wl = w[co, ci]
            for z in range(zn):
                for y in range(yn):
                    o = out[co, z, y]
                    for x in range(xn):
                        acc = o[x]
                        for dz in range(3):
                            for dy in range(3):
                                r = xp[ci, 2 * z + dz, 2 * y + dy]
                                x2 = 2 * x
                                acc += (wl[dz, dy, 0] * r[x2]
                                        + wl[dz, dy, 1] * r[x2 + 1]
                                        + wl[dz, dy, 2] * r[x2 + 2])
                        o[x] = acc


@njit(cache=True, fastmath=True)
def conv3_fwd_gen(xp, w, out, stride):
    # reference path for arbitrary odd kernel size; used off the hot path
    co_n, zn, yn, xn = out.shape
    ci_n = xp.shape[0]
    k = w.shape[2]
    for co in range(co_n):
        for z in range(zn):
            for y in range(yn):
                for x in range(xn):
                    acc = 0.0 * xp[0, 0, 0, 0]
                    for ci in range(ci_n):
                        for dz in range(k):
                            for dy in range(k):
                                for dx in range(k):
                                    acc += (w[co, ci, dz, dy, dx]
                                            * xp[ci, stride * z + dz, stride * y + dy, stride * x + dx])
                    out[co, z, y, x] = acc


@njit(cache=True, fastmath=True)
def conv3_dw_k3_s1(xp, g, dw):
    # dw[co, ci, dz, dy, dx] = sum_o g[co, o] * xp[ci, o + d]
    co_n, zn, yn, xn = g.shape
    ci_n = xp.shape[0]
    for co in range(co_n):
        for ci in range(ci_n):
            for z in range(zn):
                for y in range(yn):
                    gr = g[co, z, y]
                    for dz in range(3):
                        for dy in range(3):
                            r = xp[ci, z + dz, y + dy]
                            a0 = 0.0 * gr[0]
                            a1 = a0
                            a2 = a0
                            for x in range(xn):
                                gv = gr[x]
                                a0 += gv * r[x]
                                a1 += gv * r[x + 1]
                                a2 += gv * r[x + 2]
                            dw[co, ci, dz, dy, 0] += a0
                            dw[co, ci, dz, dy, 1] += a1
                            dw[co, ci, dz, dy, 2] += a2


@njit(cache=True, fastmath=True)
def conv3_dw_gen(xp, g, dw, stride):
    co_n, zn, yn, xn = g.shape
    ci_n = xp.shape[0]
    k = dw.shape[2]
    for co in range(co_n):
        for ci in range(ci_n):
            for z in range(zn):
                for y in range(yn):
                    gr = g[co, z, y]
                    for dz in range(k):
                        for dy in range(k):
                            r = xp[ci, stride * z + dz, stride * y + dy]
                            for dx in range(k):
                                a = 0.0 * gr[0]
                                for x in range(xn):
                                    a += gr[x] * r[stride * x + dx]
                                dw[co, ci, dz, dy, dx] += a


@njit(cache=True, fastmath=True)
def conv3_dx_gen(g, w, dxp, stride):
    # scatter: dxp[ci, s*o + d] += w[co, ci, d] * g[co, o]; dxp is padded-extent
    co_n, zn, yn, xn = g.shape
    ci_n = dxp.shape[0]
    k = w.shape[2]
    for co in range(co_n):
        for ci in range(ci_n):
            wl = w[co, ci]
            for z in range(zn):
                for y in range(yn):
                    gr = g[co, z, y]
                    for dz in range(k):
                        for dy in range(k):
                            r = dxp[ci, stride * z + dz, stride * y + dy]
                            for x in range(xn):
                                gv = gr[x]
                                for dx in range(k):
                                    r[stride * x + dx] += wl[dz, dy, dx] * gv


# --------------------------------------------------------------------------
# transpose convolution (scatter form)
# --------------------------------------------------------------------------


@njit(cache=True, fastmath=True)
def convt_fwd(x, w, out, stride, pad):
    # x: (Ci, Z, Y, X), w: (Ci, Co, k, k, k), out: (Co, stride*Z, ...)
    # out[co, stride*i + d - pad] += w[ci, co, d] * x[ci, i], clipped to the grid
    ci_n, zn, yn, xn = x.shape
    co_n = out.shape[0]
    oz, oy, ox = out.shape[1:]
    k = w.shape[2]
    for ci in range(ci_n):
        for co in range(co_n):
            wl = w[ci, co]
            for z in range(zn):
                for dz in range(k):
                    tz = stride * z + dz - pad
                    if tz < 0 or tz >= oz:
                        continue
                    for y in range(yn):
                        for dy in range(k):
                            ty = stride * y + dy - pad
                            if ty < 0 or ty >= oy:
                                continue
                            r = out[co, tz, ty]
                            xr = x[ci, z, y]
                            for xi in range(xn):
                                v = xr[xi]
                                for dx in range(k):
                                    tx = stride * xi + dx - pad
                                    if 0 <= tx < ox:
                                        r[tx] += wl[dz, dy, dx] * v


@njit(cache=True, fastmath=True)
def convt_dx(g, w, dx, stride, pad):
    # gather adjoint of convt_fwd: dx[ci, i] = sum w[ci, co, d] * g[co, s*i + d - pad]
    ci_n, zn, yn, xn = dx.shape
    co_n = g.shape[0]
    oz, oy, ox = g.shape[1:]
    k = w.shape[2]
    for ci in range(ci_n):
        for co in range(co_n):
            wl = w[ci, co]
            for z in range(zn):
                for y in range(yn):
                    for xi in range(xn):
                        acc = 0.0 * g[0, 0, 0, 0]
                        for dz in range(k):
                            tz = stride * z + dz - pad
                            if tz < 0 or tz >= oz:
                                continue
                            for dy in range(k):
                                ty = stride * y + dy - pad
                                if ty < 0 or ty >= oy:
                                    continue
                                for dxk in range(k):
                                    tx = stride * xi + dxk - pad
                                    if 0 <= tx < ox:
                                        acc += wl[dz, dy, dxk] * g[co, tz, ty, tx]
                        dx[ci, z, y, xi] += acc


@njit(cache=True, fastmath=True)
def convt_dw(x, g, dw, stride, pad):
    ci_n, zn, yn, xn = x.shape
    co_n = g.shape[0]
    oz, oy, ox = g.shape[1:]
    k = dw.shape[2]
    for ci in range(ci_n):
        for co in range(co_n):
            for dz in range(k):
                for dy in range(k):
                    for dxk in range(k):
                        acc = 0.0 * g[0, 0, 0, 0]
                        for z in range(zn):
                            tz = stride * z + dz - pad
                            if tz < 0 or tz >= oz:
                                continue
                            for y in range(yn):
                                ty = stride * y + dy - pad
                                if ty < 0 or ty >= oy:
                                    continue
                                for xi in range(xn):
                                    tx = stride * xi + dxk - pad
                                    if 0 <= tx < ox:
                                        acc += x[ci, z, y, xi] * g[co, tz, ty, tx]
                        dw[ci, co, dz, dy, dxk] += acc


# --------------------------------------------------------------------------
# trilinear sampling: warp, compose, resize
# --------------------------------------------------------------------------


@njit(cache=True)
def warp_fwd(src, disp, out):
    # out[c, z, y, x] = src[c] sampled at (z + dz, y + dy, x + dx), clamped
    cn, zn, yn, xn = src.shape
    for z in range(zn):
        for y in range(yn):
            for x in range(xn):
                cx = x + disp[0, z, y, x]
                cy = y + disp[1, z, y, x]
                cz = z + disp[2, z, y, x]
                if cx < 0.0:
                    cx = 0.0
                elif cx > xn - 1:
                    cx = xn - 1.0
                if cy < 0.0:
                    cy = 0.0
                elif cy > yn - 1:
                    cy = yn - 1.0
                if cz < 0.0:
                    cz = 0.0
                elif cz > zn - 1:
                    cz = zn - 1.0
                x0 = int(cx); y0 = int(cy); z0 = int(cz)
                fx = cx - x0; fy = cy - y0; fz = cz - z0
                x1 = x0 + 1 if x0 + 1 < xn else xn - 1
                y1 = y0 + 1 if y0 + 1 < yn else yn - 1
                z1 = z0 + 1 if z0 + 1 < zn else zn - 1
                for c in range(cn):
                    s = src[c]
                    v00 = s[z0, y0, x0] + (s[z0, y0, x1] - s[z0, y0, x0]) * fx
                    v01 = s[z0, y1, x0] + (s[z0, y1, x1] - s[z0, y1, x0]) * fx
                    v10 = s[z1, y0, x0] + (s[z1, y0, x1] - s[z1, y0, x0]) * fx
                    v11 = s[z1, y1, x0] + (s[z1, y1, x1] - s[z1, y1, x0]) * fx
                    v0 = v00 + (v01 - v00) * fy
                    v1 = v10 + (v11 - v10) * fy
                    out[c, z, y, x] = v0 + (v1 - v0) * fz


@njit(cache=True)
def warp_bwd(src, disp, g, dsrc, ddisp, need_dsrc, need_ddisp):
    # scatter-adjoint of warp_fwd; coordinate gradients vanish where clamped
    cn, zn, yn, xn = src.shape
    for z in range(zn):
        for y in range(yn):
            for x in range(xn):
                cx = x + disp[0, z, y, x]
                cy = y + disp[1, z, y, x]
                cz = z + disp[2, z, y, x]
                freex = 0.0 < cx < xn - 1.0
                freey = 0.0 < cy < yn - 1.0
                freez = 0.0 < cz < zn - 1.0
                if cx < 0.0:
                    cx = 0.0
                elif cx > xn - 1:
                    cx = xn - 1.0
                if cy < 0.0:
                    cy = 0.0
                elif cy > yn - 1:
                    cy = yn - 1.0
                if cz < 0.0:
                    cz = 0.0
                elif cz > zn - 1:
                    cz = zn - 1.0
                x0 = int(cx); y0 = int(cy); z0 = int(cz)
                fx = cx - x0; fy = cy - y0; fz = cz - z0
                x1 = x0 + 1 if x0 + 1 < xn else xn - 1
                y1 = y0 + 1 if y0 + 1 < yn else yn - 1
                z1 = z0 + 1 if z0 + 1 < zn else zn - 1
                gx = 0.0 * cx
                gy = 0.0 * cx
                gz = 0.0 * cx
                for c in range(cn):
                    gv = g[c, z, y, x]
                    if gv == 0.0:
                        continue
                    s = src[c]
                    if need_dsrc:
                        d = dsrc[c]
                        d[z0, y0, x0] += gv * (1 - fz) * (1 - fy) * (1 - fx)
                        d[z0, y0, x1] += gv * (1 - fz) * (1 - fy) * fx
                        d[z0, y1, x0] += gv * (1 - fz) * fy * (1 - fx)
                        d[z0, y1, x1] += gv * (1 - fz) * fy * fx
                        d[z1, y0, x0] += gv * fz * (1 - fy) * (1 - fx)
                        d[z1, y0, x1] += gv * fz * (1 - fy) * fx
                        d[z1, y1, x0] += gv * fz * fy * (1 - fx)
                        d[z1, y1, x1] += gv * fz * fy * fx
                    if need_ddisp:
                        dvx = ((1 - fz) * (1 - fy) * (s[z0, y0, x1] - s[z0, y0, x0])
                               + (1 - fz) * fy * (s[z0, y1, x1] - s[z0, y1, x0])
                               + fz * (1 - fy) * (s[z1, y0, x1] - s[z1, y0, x0])
                               + fz * fy * (s[z1, y1, x1] - s[z1, y1, x0]))
                        dvy = ((1 - fz) * (1 - fx) * (s[z0, y1, x0] - s[z0, y0, x0])
                               + (1 - fz) * fx * (s[z0, y1, x1] - s[z0, y0, x1])
                               + fz * (1 - fx) * (s[z1, y1, x0] - s[z1, y0, x0])
                               + fz * fx * (s[z1, y1, x1] - s[z1, y0, x1]))
                        dvz = ((1 - fy) * (1 - fx) * (s[z1, y0, x0] - s[z0, y0, x0])
                               + (1 - fy) * fx * (s[z1, y0, x1] - s[z0, y0, x1])
                               + fy * (1 - fx) * (s[z1, y1, x0] - s[z0, y1, x0])
                               + fy * fx * (s[z1, y1, x1] - s[z0, y1, x1]))
                        gx += gv * dvx
                        gy += gv * dvy
                        gz += gv * dvz
                if need_ddisp:
                    if freex:
                        ddisp[0, z, y, x] += gx
                    if freey:
                        ddisp[1, z, y, x] += gy
                    if freez:
                        ddisp[2, z, y, x] += gz


@njit(cache=True)
def resize3_fwd(src, x0a, fxa, y0a, fya, z0a, fza, out):
    # per-axis sample tables precomputed by the caller (corner aligned)
    cn = src.shape[0]
    zn, yn, xn = out.shape[1], out.shape[2], out.shape[3]
    for z in range(zn):
        z0 = z0a[z]; fz = fza[z]
        z1 = z0 + 1 if fz > 0.0 else z0
        for y in range(yn):
            y0 = y0a[y]; fy = fya[y]
            y1 = y0 + 1 if fy > 0.0 else y0
            for x in range(xn):
                x0 = x0a[x]; fx = fxa[x]
                x1 = x0 + 1 if fx > 0.0 else x0
                for c in range(cn):
                    s = src[c]
                    v00 = s[z0, y0, x0] + (s[z0, y0, x1] - s[z0, y0, x0]) * fx
                    v01 = s[z0, y1, x0] + (s[z0, y1, x1] - s[z0, y1, x0]) * fx
                    v10 = s[z1, y0, x0] + (s[z1, y0, x1] - s[z1, y0, x0]) * fx
                    v11 = s[z1, y1, x0] + (s[z1, y1, x1] - s[z1, y1, x0]) * fx
                    v0 = v00 + (v01 - v00) * fy
                    v1 = v10 + (v11 - v10) * fy
                    out[c, z, y, x] = v0 + (v1 - v0) * fz


@njit(cache=True)
def resize3_bwd(g, x0a, fxa, y0a, fya, z0a, fza, dsrc):
    cn = g.shape[0]
    zn, yn, xn = g.shape[1], g.shape[2], g.shape[3]
    for z in range(zn):
        z0 = z0a[z]; fz = fza[z]
        z1 = z0 + 1 if fz > 0.0 else z0
        for y in range(yn):
            y0 = y0a[y]; fy = fya[y]
            y1 = y0 + 1 if fy > 0.0 else y0
            for x in range(xn):
                x0 = x0a[x]; fx = fxa[x]
                x1 = x0 + 1 if fx > 0.0 else x0
                for c in range(cn):
                    gv = g[c, z, y, x]
                    if gv == 0.0:
                        continue
                    d = dsrc[c]
                    d[z0, y0, x0] += gv * (1 - fz) * (1 - fy) * (1 - fx)
                    d[z0, y0, x1] += gv * (1 - fz) * (1 - fy) * fx
                    d[z0, y1, x0] += gv * (1 - fz) * fy * (1 - fx)
                    d[z0, y1, x1] += gv * (1 - fz) * fy * fx
                    d[z1, y0, x0] += gv * fz * (1 - fy) * (1 - fx)
                    d[z1, y0, x1] += gv * fz * (1 - fy) * fx
                    d[z1, y1, x0] += gv * fz * fy * (1 - fx)
                    d[z1, y1, x1] += gv * fz * fy * fx
