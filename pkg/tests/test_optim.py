"""Registration drivers: traces, determinism, warm starts, divergence."""

import numpy as np
import pytest

from netreg.autodiff import ShapeError
from netreg.field import compose, exp_velocity, warp
from netreg.metrics import sdjdet
from netreg.network import NetConfig
from netreg.optim import (DivergenceError, ScheduleConfig, TraceRow, default_iters,
                          loss_trace_report, register_direct, register_pyramid,
                          write_trace_csv)


def smooth_pair(ext=16, seed=0, offset=True):
    """Misaligned smooth volumes: low-frequency pattern, shifted copy."""
    z, y, x = np.indices((ext,) * 3).astype(np.float64)
    fixed = np.sin(0.4 * x) + np.cos(0.3 * y + 0.2 * z)
    shift = 1.5 if offset else 0.0
    moving = np.sin(0.4 * (x - shift)) + np.cos(0.3 * (y - shift) + 0.2 * z)
    return fixed.astype(np.float32), moving.astype(np.float32)


def quick_sched(iters, **kw):
    return ScheduleConfig(iters_per_level=iters, **kw)


class TestScheduleConfig:
    def test_default_iters_pattern(self):
        assert default_iters(1) == (500,)
        assert default_iters(3) == (500, 500, 500)

    def test_resolve_length_mismatch(self):
        with pytest.raises(ValueError, match="entries"):
            quick_sched((5, 5)).resolve_iters(3)

    def test_negative_iters(self):
        with pytest.raises(ValueError, match=">= 0"):
            quick_sched((5, -1)).resolve_iters(2)

    def test_bad_lr_and_freeze(self):
        with pytest.raises(ValueError, match="lr"):
            quick_sched((5,), lr=0.0).resolve_iters(1)
        with pytest.raises(ValueError, match="freeze_fraction"):
            quick_sched((5,), freeze_fraction=1.5).resolve_iters(1)


class TestTrace:
    def test_trace_structure(self):
        fixed, moving = smooth_pair()
        res = register_pyramid(fixed, moving, NetConfig(depth=2), quick_sched((3, 4)))
        assert res.iterations == 7 and len(res.loss_trace) == 7
        assert [r.level for r in res.loss_trace] == [1] * 3 + [2] * 4
        assert [r.iteration for r in res.loss_trace] == list(range(7))

    def test_first_iteration_is_pure_ncc(self):
        # the head starts at zero, so the first field of each run is the
        # zero field and both penalties are exactly zero
        fixed, moving = smooth_pair()
        res = register_pyramid(fixed, moving, NetConfig(depth=1), quick_sched((2,)))
        first = res.loss_trace[0]
        assert first.smooth == 0.0 and first.diffeo == 0.0
        assert first.total == first.ncc

    def test_write_trace_csv(self, tmp_path):
        rows = [TraceRow(0, 1, -0.5, -0.5, 0.0, 0.0), TraceRow(1, 1, -0.6, -0.7, 0.05, 0.05)]
        p = tmp_path / "trace.csv"
        write_trace_csv(rows, p)
        lines = p.read_text().splitlines()
        assert lines[0] == "iteration,level,total,ncc,smooth,diffeo"
        assert len(lines) == 3 and lines[1].startswith("0,1,")

    def test_loss_trace_report(self):
        rows = [TraceRow(0, 1, 5.0, 0, 0, 0), TraceRow(1, 1, 3.0, 0, 0, 0),
                TraceRow(2, 2, 4.0, 0, 0, 0), TraceRow(3, 2, 2.0, 0, 0, 0)]

        class R:
            loss_trace = rows

        levels = loss_trace_report(R())
        assert [s.level for s in levels] == [1, 2]
        one, two = levels
        assert (one.start_loss, one.end_loss, one.best_loss, one.best_iteration) == (5.0, 3.0, 3.0, 1)
        assert (two.start_loss, two.end_loss, two.best_loss, two.best_iteration) == (4.0, 2.0, 2.0, 3)
        assert one.iterations == 2 and two.iterations == 2


class TestDeterminism:
    def test_same_inputs_bitwise(self):
        fixed, moving = smooth_pair()
        a = register_pyramid(fixed, moving, NetConfig(depth=2), quick_sched((3, 3)))
        b = register_pyramid(fixed, moving, NetConfig(depth=2), quick_sched((3, 3)))
        assert a.displacement.tobytes() == b.displacement.tobytes()
        assert a.warped.tobytes() == b.warped.tobytes()
        assert [r.total for r in a.loss_trace] == [r.total for r in b.loss_trace]


class TestWarmStart:
    def test_zero_iterations_return_init(self):
        fixed, moving = smooth_pair()
        rng = np.random.default_rng(0)
        init = exp_velocity(
            (0.3 * rng.standard_normal((3, 16, 16, 16))).astype(np.float32), 7)
        res = register_pyramid(fixed, moving, NetConfig(depth=1), quick_sched((0,)),
                               init_field=init)
        assert res.iterations == 0
        assert res.displacement.tobytes() == init.tobytes()
        assert res.warped.tobytes() == warp(moving, init).tobytes()

    def test_refinement_composes_with_init(self):
        # registering with an init must equal registering the pre-warped
        # moving image and composing the init with that refinement
        fixed, moving = smooth_pair()
        rng = np.random.default_rng(1)
        init = exp_velocity(
            (0.2 * rng.standard_normal((3, 16, 16, 16))).astype(np.float32), 7)
        a = register_pyramid(fixed, moving, NetConfig(depth=1), quick_sched((2,)),
                             init_field=init)
        b = register_pyramid(fixed, warp(moving, init), NetConfig(depth=1), quick_sched((2,)))
        want = compose(init, b.displacement)
        assert a.displacement.tobytes() == np.asarray(want, dtype=np.float32).tobytes()

    def test_init_shape_checked(self):
        fixed, moving = smooth_pair()
        with pytest.raises(ShapeError):
            register_pyramid(fixed, moving, NetConfig(depth=1), quick_sched((1,)),
                             init_field=np.zeros((3, 8, 8, 8), dtype=np.float32))


class TestDirect:
    def test_zero_iterations_noise_field(self):
        # before any step the field is exp of the N(0, sqrt(1e-3)) init;
        # exp barely changes a field this small, so the displacement std
        # matches the init std and sdjdet sits near its analytic value
        fixed, moving = smooth_pair()
        res = register_direct(fixed, moving, quick_sched((0,)), iterations=0)
        assert res.iterations == 0
        std = float(res.displacement.std())
        assert abs(std - np.sqrt(0.001)) / np.sqrt(0.001) < 0.05
        assert 0.025 <= res.metrics.sdjdet <= 0.055
        assert res.metrics.sdjdet == sdjdet(res.displacement)

    def test_budget_from_schedule(self):
        fixed, moving = smooth_pair(ext=8)
        res = register_direct(fixed, moving, quick_sched((2, 3, 4)))
        assert res.iterations == 9

    def test_seed_changes_init(self):
        fixed, moving = smooth_pair(ext=8)
        a = register_direct(fixed, moving, quick_sched((0,), seed=0), iterations=0)
        b = register_direct(fixed, moving, quick_sched((0,), seed=1), iterations=0)
        assert a.displacement.tobytes() != b.displacement.tobytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        fixed, moving = smooth_pair(ext=8)
        with pytest.raises(DivergenceError) as exc:
            register_direct(fixed, moving, quick_sched((4,), lr=1e30))
        assert exc.value.level == 1
        assert 0 <= exc.value.iteration < 4


class TestIdentityPair:
    def test_aligned_pair_stays_near_zero(self):
        fixed, _ = smooth_pair(offset=False)
        res = register_pyramid(fixed, fixed.copy(), NetConfig(depth=1), quick_sched((30,)))
        assert float(np.abs(res.displacement).max()) < 0.5
        assert res.loss_trace[-1].total <= res.loss_trace[0].total + 1e-4


class TestUpToLevel:
    def test_truncated_run(self):
        fixed, moving = smooth_pair(ext=24)
        res = register_pyramid(fixed, moving, NetConfig(depth=3), quick_sched((2, 2, 2)),
                               up_to_level=2)
        assert res.iterations == 4
        assert res.displacement.shape == (3, 24, 24, 24)

    def test_out_of_range(self):
        fixed, moving = smooth_pair()
        with pytest.raises(ValueError, match="up_to_level"):
            register_pyramid(fixed, moving, NetConfig(depth=2), quick_sched((1, 1)),
                             up_to_level=3)


class TestInputValidation:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            register_pyramid(np.zeros((8, 8, 8), dtype=np.float32),
                             np.zeros((8, 8, 4), dtype=np.float32),
                             NetConfig(depth=1), quick_sched((1,)))

    def test_non_finite_rejected(self):
        bad = np.zeros((8, 8, 8), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            register_direct(bad, np.zeros((8, 8, 8), dtype=np.float32), quick_sched((1,)))
