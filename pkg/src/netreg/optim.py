"""Registration drivers.

register_pyramid optimizes the untrained pyramidal network for one image
pair, coarse to fine: level i trains for its iteration budget with the
lower levels frozen for the first freeze_fraction of it, then jointly.
While the lower levels are frozen their composed field is constant, so
it is computed once and reused instead of re-running their graphs.

register_direct drops the network and optimizes a velocity-field leaf
initialized from Gaussian noise, for the same summed budget.

Iterations are full-volume gradient steps; there is no mini-batching.
A non-finite loss aborts with a DivergenceError naming the level and
iteration rather than clipping gradients.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import AdamState, ShapeError, Tensor, adam_step, backward, zero_grad
from .field import compose, exp_velocity, upsample_field, warp
from .losses import LossWeights, NccFixedCache, total_loss
from .metrics import EvalReport, sdjdet
from .network import (NetConfig, build, forward_level, image_pyramid,
                      pyramid_field, validate_extents)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, level: int, iteration: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at level {level}, iteration {iteration}")
        self.level = level
        self.iteration = iteration


def default_iters(depth: int) -> tuple[int, ...]:
    """500 iterations per level: sized so a 64-cube depth-3 run finishes
    on one CPU core in well under ten minutes. The coarse levels are
    cheap, so almost all of the wall time is the finest level."""
    return (500,) * depth


@dataclass
class ScheduleConfig:
    iters_per_level: tuple[int, ...] | None = None  # None: derived from depth
    lr: float = 1e-4
    freeze_fraction: float = 0.2
    weights: LossWeights = dc_field(default_factory=LossWeights)
    squaring_steps: int = 7
    seed: int = 0

    def resolve_iters(self, depth: int) -> tuple[int, ...]:
        iters = tuple(self.iters_per_level) if self.iters_per_level is not None else default_iters(depth)
        if len(iters) != depth:
            raise ValueError(f"iters_per_level has {len(iters)} entries for depth {depth}")
        if any(i < 0 for i in iters):
            raise ValueError(f"iteration counts must be >= 0, got {iters}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.freeze_fraction <= 1.0:
            raise ValueError(f"freeze_fraction must be in [0, 1], got {self.freeze_fraction}")
        return iters


@dataclass
class TraceRow:
    iteration: int
    level: int
    total: float
    ncc: float
    smooth: float
    diffeo: float


@dataclass
class LevelSummary:
    level: int
    iterations: int
    start_loss: float
    end_loss: float
    best_loss: float
    best_iteration: int


@dataclass
class RegistrationResult:
    displacement: np.ndarray
    warped: np.ndarray
    loss_trace: list[TraceRow]
    metrics: EvalReport
    wall_time: float
    iterations: int


def _check_pair(fixed: np.ndarray, moving: np.ndarray):
    if fixed.ndim != 3 or moving.ndim != 3:
        raise ShapeError(f"images must be 3D volumes, got {fixed.shape} and {moving.shape}")
    if fixed.shape != moving.shape:
        raise ShapeError(f"extent mismatch: fixed {fixed.shape} vs moving {moving.shape}")
    if not (np.isfinite(fixed).all() and np.isfinite(moving).all()):
        raise ValueError("input volumes contain non-finite values")


def register_pyramid(fixed: np.ndarray, moving: np.ndarray, net_cfg: NetConfig,
                     sched: ScheduleConfig, init_field: np.ndarray | None = None,
                     up_to_level: int | None = None) -> RegistrationResult:
    """Coarse-to-fine network registration of moving onto fixed.

    With init_field the moving image is pre-warped, the network refines
    the residual, and the final displacement is compose(init, residual);
    zero refinement iterations return init_field unchanged.
    """
    t0 = time.monotonic()
    fixed = np.ascontiguousarray(fixed, dtype=np.float32)
    moving = np.ascontiguousarray(moving, dtype=np.float32)
    _check_pair(fixed, moving)
    net_cfg.validate()
    validate_extents(fixed.shape, net_cfg.depth)
    depth = net_cfg.depth
    last = depth if up_to_level is None else up_to_level
    if not 1 <= last <= depth:
        raise ValueError(f"up_to_level must be in 1..{depth}, got {up_to_level}")
    iters = sched.resolve_iters(depth)
    sched.weights.validate()
    steps = sched.squaring_steps

    if init_field is not None:
        init_field = np.ascontiguousarray(init_field, dtype=np.float32)
        if init_field.shape != (3,) + fixed.shape:
            raise ShapeError(f"init_field shape {init_field.shape} does not match images {fixed.shape}")
        m_work = warp(moving, init_field)
    else:
        m_work = moving

    fixed_levels = image_pyramid(fixed, depth)
    mov_levels = image_pyramid(m_work, depth)
    net = build(net_cfg)
    states = [AdamState(lr=sched.lr) for _ in range(depth)]
    caches = [None] * depth
    trace: list[TraceRow] = []
    giter = 0

    def run_graph(level, prefix):
        if prefix is None:
            return pyramid_field(net, None, up_to_level=level, squaring_steps=steps,
                                 moving_levels=mov_levels, fixed_levels=fixed_levels)
        base = Tensor(prefix)
        m_i = Tensor(mov_levels[level - 1][None])
        v = forward_level(net, level, warp(m_i, base), base,
                          fixed_at_level=fixed_levels[level - 1] if net_cfg.two_channel_input else None)
        return compose(base, exp_velocity(v, steps))

    for lvl in range(1, last + 1):
        n_it = iters[lvl - 1]
        freeze_n = int(sched.freeze_fraction * n_it) if lvl > 1 else 0
        if caches[lvl - 1] is None:
            caches[lvl - 1] = NccFixedCache(fixed_levels[lvl - 1], sched.weights.ncc_window)
        prefix = None
        for t in range(n_it):
            frozen = t < freeze_n
            net.level_frozen = [j < lvl - 1 and frozen for j in range(depth)]
            if frozen and prefix is None:
                below = pyramid_field(net, None, up_to_level=lvl - 1, squaring_steps=steps,
                                      moving_levels=mov_levels, fixed_levels=fixed_levels)
                prefix = upsample_field(below.data)
            if not frozen:
                prefix = None
            phi = run_graph(lvl, prefix)
            total, parts = total_loss(fixed_levels[lvl - 1], mov_levels[lvl - 1], phi,
                                      sched.weights, squaring_steps=steps,
                                      ncc_cache=caches[lvl - 1])
            if not np.isfinite(parts["total"]):
                raise DivergenceError(lvl, giter, parts["total"])
            backward(total)
            active = range(lvl, lvl + 1) if frozen else range(1, lvl + 1)
            for j in active:
                params = net.level_parameters(j)
                grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
                adam_step([p.data for p in params], grads, states[j - 1])
            zero_grad(net.parameters())
            trace.append(TraceRow(giter, lvl, parts["total"], parts["ncc"],
                                  parts["smooth"], parts["diffeo"]))
            giter += 1
            if t == 0 or (t + 1) % 100 == 0:
                log.debug("level %d iter %d/%d loss %.6f", lvl, t + 1, n_it, parts["total"])

    phi_arr = pyramid_field(net, None, up_to_level=last, squaring_steps=steps,
                            moving_levels=mov_levels, fixed_levels=fixed_levels).data
    for _ in range(depth - last):
        phi_arr = upsample_field(phi_arr)
    if init_field is not None:
        phi_arr = compose(init_field, phi_arr)
    warped = warp(moving, phi_arr)
    rep = EvalReport(sdjdet=sdjdet(phi_arr))
    return RegistrationResult(phi_arr, warped, trace, rep, time.monotonic() - t0, giter)


def register_direct(fixed: np.ndarray, moving: np.ndarray, sched: ScheduleConfig,
                    iterations: int | None = None) -> RegistrationResult:
    """Optimize the velocity field itself: Gaussian-noise init, no network."""
    t0 = time.monotonic()
    fixed = np.ascontiguousarray(fixed, dtype=np.float32)
    moving = np.ascontiguousarray(moving, dtype=np.float32)
    _check_pair(fixed, moving)
    if iterations is None:
        n_levels = len(sched.iters_per_level) if sched.iters_per_level is not None else 3
        iterations = sum(sched.resolve_iters(n_levels))
    sched.weights.validate()
    rng = np.random.default_rng(sched.seed)
    v = Tensor(rng.normal(0.0, np.sqrt(0.001), size=(3,) + fixed.shape).astype(np.float32),
               requires_grad=True)
    state = AdamState(lr=sched.lr)
    cache = NccFixedCache(fixed, sched.weights.ncc_window)
    trace: list[TraceRow] = []
    for t in range(iterations):
        total, parts = total_loss(fixed, moving, v, sched.weights, field_is_velocity=True,
                                  squaring_steps=sched.squaring_steps, ncc_cache=cache)
        if not np.isfinite(parts["total"]):
            raise DivergenceError(1, t, parts["total"])
        backward(total)
        adam_step([v.data], [v.grad], state)
        zero_grad([v])
        trace.append(TraceRow(t, 1, parts["total"], parts["ncc"], parts["smooth"], parts["diffeo"]))
    phi_arr = exp_velocity(v.data, sched.squaring_steps)
    warped = warp(moving, phi_arr)
    rep = EvalReport(sdjdet=sdjdet(phi_arr))
    return RegistrationResult(phi_arr, warped, trace, rep, time.monotonic() - t0, iterations)


def loss_trace_report(result: RegistrationResult) -> list[LevelSummary]:
    """Per-level start/end/best recomputed from the stored trace."""
    out = []
    for lvl in sorted({r.level for r in result.loss_trace}):
        rows = [r for r in result.loss_trace if r.level == lvl]
        best = min(rows, key=lambda r: r.total)
        out.append(LevelSummary(lvl, len(rows), rows[0].total, rows[-1].total,
                                best.total, best.iteration))
    return out


def write_trace_csv(trace: list[TraceRow], path):
    with open(path, "w") as fh:
        fh.write("iteration,level,total,ncc,smooth,diffeo\n")
        for r in trace:
            fh.write(f"{r.iteration},{r.level},{r.total:.8f},{r.ncc:.8f},{r.smooth:.8f},{r.diffeo:.8f}\n")
