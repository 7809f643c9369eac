"""Displacement and velocity fields: warping, composition, exponentiation.

Fields are arrays of shape (3, Z, Y, X) in voxel units.  Channel 0
displaces x (the fastest storage axis), channel 1 y, channel 2 z, so a
constant field (a, 0, 0) shifts sampling along x by a.

Every public function accepts either plain ndarrays (pure computation)
or autodiff Tensors (recorded on the tape).  Sampling outside the grid
clamps to the boundary.
"""

from __future__ import annotations

import numpy as np

from . import _kernels as _k
from .autodiff import ShapeError, Tensor, accumulate, node, scale, trilinear_resize


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _dummy(dtype):
    return np.zeros((1, 1, 1, 1), dtype=dtype)


def _check_field(arr, name):
    if arr.ndim != 4 or arr.shape[0] != 3:
        raise ShapeError(f"{name} must have shape (3, Z, Y, X), got {arr.shape}")


def warp(m, phi):
    """Sample m at x + phi(x) with trilinear interpolation.

    ndarray m may be (Z, Y, X) or (C, Z, Y, X); Tensor m must be 4D.
    """
    if _is_tensor(m) or _is_tensor(phi):
        mt = m if _is_tensor(m) else Tensor(np.asarray(m)[None] if np.asarray(m).ndim == 3 else m)
        pt = phi if _is_tensor(phi) else Tensor(phi)
        if mt.data.ndim != 4:
            raise ShapeError(f"warp input must be (C, Z, Y, X) on the tape, got {mt.data.shape}")
        _check_field(pt.data, "warp field")
        if mt.data.shape[1:] != pt.data.shape[1:]:
            raise ShapeError(f"warp extent mismatch: volume {mt.data.shape[1:]} vs field {pt.data.shape[1:]}")
        out = np.empty_like(mt.data)
        _k.warp_fwd(mt.data, pt.data, out)

        def bwd(g):
            g = np.ascontiguousarray(g)
            nm, np_ = mt.requires_grad, pt.requires_grad
            dm = np.zeros_like(mt.data) if nm else _dummy(mt.dtype)
            dp = np.zeros_like(pt.data) if np_ else _dummy(pt.dtype)
            _k.warp_bwd(mt.data, pt.data, g, dm, dp, nm, np_)
            if nm:
                accumulate(mt, dm, own=True)
            if np_:
                accumulate(pt, dp, own=True)

        return node(out, (mt, pt), bwd)

    m = np.asarray(m)
    phi = np.asarray(phi)
    _check_field(phi, "warp field")
    squeeze = m.ndim == 3
    m4 = m[None] if squeeze else m
    if m4.ndim != 4 or m4.shape[1:] != phi.shape[1:]:
        raise ShapeError(f"warp extent mismatch: volume {m.shape} vs field {phi.shape[1:]}")
    if m4.dtype != phi.dtype:
        m4 = m4.astype(phi.dtype)
    out = np.empty_like(m4)
    _k.warp_fwd(np.ascontiguousarray(m4), phi, out)
    return out[0] if squeeze else out


def compose(outer, inner):
    """Field composition: result(x) = inner(x) + outer(x + inner(x)).

    Warping by the result equals warping by `outer` first, then by
    `inner` (the refinement applied to an already-warped image goes in
    the inner slot).
    """
    if _is_tensor(outer) or _is_tensor(inner):
        a = outer if _is_tensor(outer) else Tensor(outer)
        b = inner if _is_tensor(inner) else Tensor(inner)
        _check_field(a.data, "compose outer")
        _check_field(b.data, "compose inner")
        if a.data.shape != b.data.shape:
            raise ShapeError(f"compose extent mismatch: {a.data.shape} vs {b.data.shape}")
        out = np.empty_like(b.data)
        _k.warp_fwd(a.data, b.data, out)
        out += b.data

        def bwd(g):
            g = np.ascontiguousarray(g)
            na, nb = a.requires_grad, b.requires_grad
            da = np.zeros_like(a.data) if na else _dummy(a.dtype)
            db = np.zeros_like(b.data) if nb else _dummy(b.dtype)
            _k.warp_bwd(a.data, b.data, g, da, db, na, nb)
            if na:
                accumulate(a, da, own=True)
            if nb:
                db += g  # direct b term of result(x) = b(x) + a(x + b(x))
                accumulate(b, db, own=True)

        return node(out, (a, b), bwd)

    outer = np.asarray(outer)
    inner = np.asarray(inner)
    _check_field(outer, "compose outer")
    _check_field(inner, "compose inner")
    if outer.shape != inner.shape:
        raise ShapeError(f"compose extent mismatch: {outer.shape} vs {inner.shape}")
    if outer.dtype != inner.dtype:
        common = np.result_type(outer.dtype, inner.dtype)
        outer = outer.astype(common)
        inner = inner.astype(common)
    out = np.empty_like(inner)
    _k.warp_fwd(outer, inner, out)
    out += inner
    return out


def exp_velocity(v, squaring_steps: int = 7):
    """Scaling and squaring: phi = exp(v), diffeomorphic for smooth v."""
    squaring_steps = int(squaring_steps)
    if squaring_steps < 1:
        raise ValueError(f"squaring_steps must be >= 1, got {squaring_steps}")
    if _is_tensor(v):
        _check_field(v.data, "exp_velocity input")
        phi = scale(v, 1.0 / 2 ** squaring_steps)
        for _ in range(squaring_steps):
            phi = compose(phi, phi)
        return phi
    v = np.asarray(v)
    _check_field(v, "exp_velocity input")
    phi = v * v.dtype.type(1.0 / 2 ** squaring_steps)
    for _ in range(squaring_steps):
        phi = compose(phi, phi)
    return phi


def resize_volume(arr: np.ndarray, factor: float) -> np.ndarray:
    """Corner-aligned trilinear resize of a plain (Z,Y,X) or (C,Z,Y,X) array."""
    arr = np.asarray(arr)
    squeeze = arr.ndim == 3
    t = Tensor(arr[None] if squeeze else arr)
    out = trilinear_resize(t, factor).data
    return out[0] if squeeze else out


def upsample_field(phi, factor: int = 2):
    """Double the grid and the vector magnitudes (voxel units scale along)."""
    if factor != 2:
        raise ValueError(f"upsample_field factor must be 2, got {factor}")
    if _is_tensor(phi):
        _check_field(phi.data, "upsample_field input")
        return scale(trilinear_resize(phi, 2.0), 2.0)
    phi = np.asarray(phi)
    _check_field(phi, "upsample_field input")
    return resize_volume(phi, 2.0) * phi.dtype.type(2.0)


def jacobian_determinant(phi: np.ndarray) -> np.ndarray:
    """det(I + grad phi) per voxel; central differences, one-sided at edges."""
    phi = np.asarray(phi.data if _is_tensor(phi) else phi)
    _check_field(phi, "jacobian_determinant input")
    if min(phi.shape[1:]) < 2:
        raise ShapeError(f"jacobian_determinant needs extents >= 2, got {phi.shape[1:]}")
    p = phi.astype(np.float64)
    # J[i][j] = d phi_i / d axis_j, i and j in (x, y, z) order;
    # x is spatial axis 2 of each component, y axis 1, z axis 0
    j = np.empty((3, 3) + phi.shape[1:], dtype=np.float64)
    for i in range(3):
        gz, gy, gx = np.gradient(p[i])
        j[i][0] = gx
        j[i][1] = gy
        j[i][2] = gz
    for i in range(3):
        j[i][i] += 1.0
    det = (j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
           - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
           + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]))
    return det


def zero_field(extents, dtype=np.float32) -> np.ndarray:
    return np.zeros((3,) + tuple(extents), dtype=dtype)
