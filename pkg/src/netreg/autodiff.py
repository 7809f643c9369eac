"""Minimal reverse-mode autodiff over a fixed operator set.

The graph is recorded dynamically: every operation creates a new
:class:`Tensor` holding its inputs and a backward closure.  Creation
order is the topological order, so :func:`backward` just sweeps nodes in
decreasing creation id.  There is no broadcasting; elementwise ops
require identical shapes.  Spatial tensors are (C, Z, Y, X).

Forward arithmetic runs in the tensor dtype (float32 in production);
reductions accumulate in float64 and reduction nodes carry float64
scalars.  Rebuilding the graph each iteration in a fresh dtype (float64
leaves) gives the 64-bit reference path used by gradient checks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k


class ShapeError(ValueError):
    """Operand shapes violate an operator contract."""


class TapeError(RuntimeError):
    """Backward called on a spent or detached graph."""


_ids = itertools.count()

_RESIZE_FACTORS = (0.25, 0.5, 2.0)


class Tensor:
    """A node of the recorded computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "_tid", "_spent")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd
        self._tid = next(_ids)
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def node(data, parents, bwd):
    """Record an op result.  `bwd(g)` must accumulate into the parents."""
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, tuple(parents), bwd if req else None)


def accumulate(t: Tensor, val: np.ndarray, own: bool = False):
    """Add `val` to t.grad.  `own=True` hands over a freshly allocated array."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = val if own else val.copy()
    else:
        t.grad += val


def zero_grad(params):
    for p in params:
        p.grad = None


def backward(loss: Tensor):
    """Reverse sweep from a scalar loss; each loss node may be swept once."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._spent:
        raise TapeError("backward was already called on this loss")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any requires_grad leaf (detached graph)")
    loss._spent = True

    seen = {id(loss)}
    order = [loss]
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                order.append(p)
                stack.append(p)
    order.sort(key=lambda t: t._tid, reverse=True)

    loss.grad = np.ones_like(loss.data)
    for t in order:
        if t._bwd is not None and t.grad is not None:
            t._bwd(t.grad)
            t.grad = None  # free intermediates early; leaves have no _bwd


# --------------------------------------------------------------------------
# elementwise ops and reductions
# --------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, opname: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bwd(g):
        accumulate(a, g)
        accumulate(b, g)

    return node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bwd(g):
        accumulate(a, g)
        accumulate(b, -g, own=True)

    return node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bwd(g):
        accumulate(a, g * b.data, own=True)
        accumulate(b, g * a.data, own=True)

    return node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        accumulate(a, g * s, own=True)

    return node(a.data * np.asarray(s, dtype=a.dtype), (a,), bwd)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        accumulate(a, np.full(a.data.shape, float(g) / n, dtype=a.dtype), own=True)

    return node(np.mean(a.data, dtype=np.float64), (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        accumulate(a, np.full(a.data.shape, float(g), dtype=a.dtype), own=True)

    return node(np.sum(a.data, dtype=np.float64), (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    slope = float(slope)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    neg = a.data < 0  # x = 0 uses derivative 1

    def bwd(g):
        ga = g.copy()
        ga[neg] *= slope
        accumulate(a, ga, own=True)

    out = np.where(neg, a.data * a.data.dtype.type(slope), a.data)
    return node(out, (a,), bwd)


# --------------------------------------------------------------------------
# convolution ops
# --------------------------------------------------------------------------


def _pad3(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    c, z, y, xn = x.shape
    out = np.zeros((c, z + 2 * p, y + 2 * p, xn + 2 * p), dtype=x.dtype)
    out[:, p:-p, p:-p, p:-p] = x
    return out


def conv3(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3D convolution, odd kernel, zero padding (k-1)/2, stride 1 or 2."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv3 input must be (C, Z, Y, X), got {x.data.shape}")
    if w.data.ndim != 5 or w.data.shape[2] != w.data.shape[3] or w.data.shape[3] != w.data.shape[4]:
        raise ShapeError(f"conv3 weight must be (C_out, C_in, k, k, k), got {w.data.shape}")
    k = w.data.shape[2]
    if k % 2 != 1:
        raise ShapeError(f"conv3 kernel size must be odd, got {k}")
    if w.data.shape[1] != x.data.shape[0]:
        raise ShapeError(f"conv3 channel axis mismatch: input has {x.data.shape[0]} channels, "
                         f"weight expects {w.data.shape[1]}")
    if b.data.shape != (w.data.shape[0],):
        raise ShapeError(f"conv3 bias axis 0 mismatch: expected ({w.data.shape[0]},), got {b.data.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv3 stride must be 1 or 2, got {stride}")

    pad = (k - 1) // 2
    xp = _pad3(x.data, pad)
    out_sp = tuple(-(-e // stride) for e in x.data.shape[1:])
    if k == 3 and stride == 1:
        out = np.empty((w.data.shape[0],) + out_sp, dtype=x.dtype)
        _k.conv3_fwd_k3_s1(xp, w.data, out)
    elif k == 3 and stride == 2:
        out = np.zeros((w.data.shape[0],) + out_sp, dtype=x.dtype)
        _k.conv3_fwd_k3_s2(xp, w.data, out)
    else:
        out = np.empty((w.data.shape[0],) + out_sp, dtype=x.dtype)
        _k.conv3_fwd_gen(xp, w.data, out, stride)
    out += b.data[:, None, None, None]

    def bwd(g):
        g = np.ascontiguousarray(g)
        if b.requires_grad:
            accumulate(b, np.sum(g, axis=(1, 2, 3), dtype=np.float64).astype(b.dtype), own=True)
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            if k == 3 and stride == 1:
                _k.conv3_dw_k3_s1(xp, g, dw)
            else:
                _k.conv3_dw_gen(xp, g, dw, stride)
            accumulate(w, dw, own=True)
        if x.requires_grad:
            if k == 3 and stride == 1:
                # dX of a stride-1 conv is a conv of the padded gradient with
                # the flipped, channel-transposed kernel
                gp = _pad3(g, 2)
                wt = np.ascontiguousarray(w.data[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
                dxp = np.empty_like(xp)
                _k.conv3_fwd_k3_s1(gp, wt, dxp)
                dx = np.ascontiguousarray(dxp[:, pad:-pad, pad:-pad, pad:-pad]) if pad else dxp
            else:
                dxp = np.zeros_like(xp)
                _k.conv3_dx_gen(g, w.data, dxp, stride)
                dx = np.ascontiguousarray(dxp[:, pad:-pad, pad:-pad, pad:-pad]) if pad else dxp
            accumulate(x, dx, own=True)

    return node(out, (x, w, b), bwd)


def conv3_transpose(x: Tensor, w: Tensor, stride: int = 2) -> Tensor:
    """Adjoint of the stride-2 conv3; output extent is 2x input per axis."""
    if stride != 2:
        raise ValueError(f"conv3_transpose stride must be 2, got {stride}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv3_transpose input must be (C, Z, Y, X), got {x.data.shape}")
    if w.data.ndim != 5:
        raise ShapeError(f"conv3_transpose weight must be (C_in, C_out, k, k, k), got {w.data.shape}")
    if w.data.shape[0] != x.data.shape[0]:
        raise ShapeError(f"conv3_transpose channel axis mismatch: input has {x.data.shape[0]} channels, "
                         f"weight expects {w.data.shape[0]}")
    k = w.data.shape[2]
    pad = (k - 1) // 2
    out = np.zeros((w.data.shape[1],) + tuple(stride * e for e in x.data.shape[1:]), dtype=x.dtype)
    _k.convt_fwd(x.data, w.data, out, stride, pad)

    def bwd(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            _k.convt_dx(g, w.data, dx, stride, pad)
            accumulate(x, dx, own=True)
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            _k.convt_dw(x.data, g, dw, stride, pad)
            accumulate(w, dw, own=True)

    return node(out, (x, w), bwd)


def max_pool2(x: Tensor) -> Tensor:
    """2x2x2 max pooling; gradient goes to the first maximum per window."""
    c, z, y, xn = x.data.shape
    if z % 2 or y % 2 or xn % 2:
        raise ShapeError(f"max_pool2 needs even spatial extents, got {x.data.shape[1:]}")
    win = (x.data.reshape(c, z // 2, 2, y // 2, 2, xn // 2, 2)
           .transpose(0, 1, 3, 5, 2, 4, 6)
           .reshape(c, z // 2, y // 2, xn // 2, 8))
    arg = win.argmax(axis=-1)  # first max = lowest (dz, dy, dx), the lowest linear index
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        dwin = np.zeros(win.shape, dtype=x.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None].astype(x.dtype), axis=-1)
        dx = (dwin.reshape(c, z // 2, y // 2, xn // 2, 2, 2, 2)
              .transpose(0, 1, 4, 2, 5, 3, 6)
              .reshape(c, z, y, xn))
        accumulate(x, np.ascontiguousarray(dx), own=True)

    return node(np.ascontiguousarray(out), (x,), bwd)


def _axis_table(n_in: int, n_out: int, dtype):
    """Corner-aligned sample positions: index array and fractional weights."""
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.int64), np.zeros(n_out, dtype=dtype)
    c = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
    c = np.clip(c, 0.0, float(n_in - 1))
    i0 = np.floor(c).astype(np.int64)
    f = c - i0
    snap = f > 1.0 - 1e-9  # guard against 0.999... fractions rounding up to 1.0
    i0[snap] += 1
    f[snap] = 0.0
    i0 = np.minimum(i0, n_in - 1)
    return i0, f.astype(dtype)


def trilinear_resize(x: Tensor, factor: float) -> Tensor:
    """Corner-aligned trilinear resampling by 1/4, 1/2, or 2 per axis."""
    if x.data.ndim != 4:
        raise ShapeError(f"trilinear_resize input must be (C, Z, Y, X), got {x.data.shape}")
    if not any(abs(factor - f) < 1e-12 for f in _RESIZE_FACTORS):
        raise ValueError(f"trilinear_resize factor must be one of {_RESIZE_FACTORS}, got {factor}")
    c = x.data.shape[0]
    out_sp = tuple(max(1, round(e * factor)) for e in x.data.shape[1:])
    z0, fz = _axis_table(x.data.shape[1], out_sp[0], x.dtype)
    y0, fy = _axis_table(x.data.shape[2], out_sp[1], x.dtype)
    x0, fx = _axis_table(x.data.shape[3], out_sp[2], x.dtype)
    out = np.empty((c,) + out_sp, dtype=x.dtype)
    _k.resize3_fwd(x.data, x0, fx, y0, fy, z0, fz, out)

    def bwd(g):
        dx = np.zeros_like(x.data)
        _k.resize3_bwd(np.ascontiguousarray(g), x0, fx, y0, fy, z0, fz, dx)
        accumulate(x, dx, own=True)

    return node(out, (x,), bwd)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------


@dataclass
class AdamState:
    """Moment buffers for one parameter group, stepped together."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on the parameter arrays."""
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise ShapeError("adam_step: state was built for a different parameter group")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: param shape {p.shape} vs grad shape {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return state
