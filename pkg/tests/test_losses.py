"""Objective terms against closed-form values and a loop-based NCC oracle."""

import numpy as np
import pytest

from netreg.autodiff import Tensor, backward
from netreg.field import zero_field
from netreg.losses import (NCC_EPS, LossWeights, NccFixedCache, box_sum,
                           ncc_dissimilarity, negative_jacobian_penalty,
                           smoothness_penalty, total_loss)


def ref_ncc(f, w, window):
    """Per-voxel windowed NCC via explicit slicing, float64."""
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    r = (window - 1) // 2
    zs, ys, xs = f.shape
    acc = 0.0
    for z in range(zs):
        for y in range(ys):
            for x in range(xs):
                sl = (slice(max(0, z - r), min(zs, z + r + 1)),
                      slice(max(0, y - r), min(ys, y + r + 1)),
                      slice(max(0, x - r), min(xs, x + r + 1)))
                fw, ww = f[sl].ravel(), w[sl].ravel()
                n = fw.size
                cross = np.sum(fw * ww) - np.sum(fw) * np.sum(ww) / n
                var_f = np.sum(fw * fw) - np.sum(fw) ** 2 / n
                var_w = np.sum(ww * ww) - np.sum(ww) ** 2 / n
                acc += cross / np.sqrt((var_f + NCC_EPS) * (var_w + NCC_EPS))
    return -acc / f.size


def ref_box_sum(u, window):
    """Shift-and-accumulate box filter, clipped at the edges."""
    u = np.asarray(u, dtype=np.float64)
    r = (window - 1) // 2
    out = np.zeros_like(u)
    zs, ys, xs = u.shape
    for dz in range(-r, r + 1):
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                src = u[max(0, dz):zs + min(0, dz),
                        max(0, dy):ys + min(0, dy),
                        max(0, dx):xs + min(0, dx)]
                out[max(0, -dz):zs + min(0, -dz),
                    max(0, -dy):ys + min(0, -dy),
                    max(0, -dx):xs + min(0, -dx)] += src
    return out


class TestBoxSum:
    def test_matches_shift_accumulate(self):
        rng = np.random.default_rng(0)
        u = rng.standard_normal((6, 5, 4))
        for w in (1, 3, 5):
            np.testing.assert_allclose(box_sum(u, w), ref_box_sum(u, w), atol=1e-9)

    def test_window_one_is_identity(self):
        u = np.random.default_rng(1).standard_normal((4, 4, 4))
        np.testing.assert_array_equal(box_sum(u, 1), u)

    def test_edge_counts(self):
        n = box_sum(np.ones((4, 4, 4)), 3)
        assert n[0, 0, 0] == 8.0   # corner window is 2x2x2
        assert n[1, 1, 1] == 27.0  # full interior window
        assert n[0, 1, 1] == 18.0  # face


class TestNcc:
    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(2)
        f = rng.uniform(0, 1, (6, 5, 4))
        w = rng.uniform(0, 1, (6, 5, 4))
        got = ncc_dissimilarity(f, w, window=3)
        assert abs(got - ref_ncc(f, w, 3)) < 1e-9

    def test_self_similarity_near_minus_one(self):
        f = np.random.default_rng(3).uniform(0, 1, (12, 12, 12))
        assert abs(ncc_dissimilarity(f, f, window=7) - (-1.0)) < 1e-5

    def test_affine_invariance(self):
        f = np.random.default_rng(4).uniform(0, 1, (12, 12, 12))
        assert abs(ncc_dissimilarity(f, 2.0 * f + 3.0, window=7) - (-1.0)) < 1e-5

    def test_constant_image_scores_zero(self):
        # zero variance in w leaves cross = 0: no spurious correlation
        f = np.random.default_rng(5).uniform(0, 1, (8, 8, 8))
        w = np.full((8, 8, 8), 0.4)
        assert abs(ncc_dissimilarity(f, w, window=7)) < 1e-12

    def test_anticorrelation_is_positive(self):
        f = np.random.default_rng(6).uniform(0, 1, (10, 10, 10))
        val = ncc_dissimilarity(f, -f, window=5)
        assert abs(val - 1.0) < 1e-5

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(7)
        f = rng.uniform(0, 1, (5, 5, 5))
        w0 = rng.uniform(0, 1, (5, 5, 5))
        wt = Tensor(w0.copy(), requires_grad=True)
        backward(ncc_dissimilarity(f, wt, window=3))
        h = 1e-6
        for idx in [(0, 0, 0), (2, 3, 1), (4, 4, 4)]:
            wp, wm = w0.copy(), w0.copy()
            wp[idx] += h
            wm[idx] -= h
            fd = (ref_ncc(f, wp, 3) - ref_ncc(f, wm, 3)) / (2 * h)
            assert abs(wt.grad[idx] - fd) < 1e-5

    def test_cache_reuse_and_mismatch(self):
        rng = np.random.default_rng(8)
        f = rng.uniform(0, 1, (6, 6, 6))
        w = rng.uniform(0, 1, (6, 6, 6))
        cache = NccFixedCache(f, 5)
        assert ncc_dissimilarity(f, w, window=5, cache=cache) == ncc_dissimilarity(f, w, window=5)
        with pytest.raises(ValueError):
            ncc_dissimilarity(f, w, window=3, cache=cache)

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            NccFixedCache(np.zeros((4, 4, 4)), 4)


class TestSmoothness:
    def test_linear_ramp_closed_form(self):
        # phi_0 = a x on an n^3 grid: mean squared forward difference a^2/9
        n, a = 6, 0.6
        xx = np.indices((n, n, n))[2].astype(np.float64)
        phi = np.zeros((3, n, n, n))
        phi[0] = a * xx
        assert abs(smoothness_penalty(phi) - a * a / 9.0) < 1e-12

    def test_constant_field_is_zero(self):
        phi = zero_field((5, 5, 5)).astype(np.float64)
        phi += 2.5
        assert smoothness_penalty(phi) == 0.0

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(9)
        p0 = 0.1 * rng.standard_normal((3, 4, 4, 4))
        pt = Tensor(p0.copy(), requires_grad=True)
        backward(smoothness_penalty(pt))
        h = 1e-6
        for idx in [(0, 0, 0, 0), (1, 2, 1, 3), (2, 3, 3, 3)]:
            pp, pm = p0.copy(), p0.copy()
            pp[idx] += h
            pm[idx] -= h
            fd = (smoothness_penalty(pp) - smoothness_penalty(pm)) / (2 * h)
            assert abs(pt.grad[idx] - fd) < 1e-6


class TestNegativeJacobian:
    def test_uniform_fold_penalty_one(self):
        # phi_x = -2x: det J = -1 everywhere, hinge^2 = 1, mean = 1
        xx = np.indices((6, 6, 6))[2].astype(np.float64)
        phi = np.zeros((3, 6, 6, 6))
        phi[0] = -2.0 * xx
        assert abs(negative_jacobian_penalty(phi) - 1.0) < 1e-12

    def test_expansion_has_zero_penalty(self):
        xx = np.indices((6, 6, 6))[2].astype(np.float64)
        phi = np.zeros((3, 6, 6, 6))
        phi[0] = 0.5 * xx
        assert negative_jacobian_penalty(phi) == 0.0

    def test_zero_field_zero_penalty(self):
        assert negative_jacobian_penalty(zero_field((5, 5, 5))) == 0.0

    def test_gradient_matches_fd_in_hinge_region(self):
        rng = np.random.default_rng(10)
        xx = np.indices((4, 4, 4))[2].astype(np.float64)
        p0 = 0.05 * rng.standard_normal((3, 4, 4, 4))
        p0[0] -= 1.6 * xx  # det around -0.6: hinge active, away from 0
        pt = Tensor(p0.copy(), requires_grad=True)
        backward(negative_jacobian_penalty(pt))
        h = 1e-6
        for idx in [(0, 1, 1, 1), (1, 2, 0, 3), (2, 0, 2, 2)]:
            pp, pm = p0.copy(), p0.copy()
            pp[idx] += h
            pm[idx] -= h
            fd = (negative_jacobian_penalty(pp) - negative_jacobian_penalty(pm)) / (2 * h)
            assert abs(pt.grad[idx] - fd) < 1e-6


class TestTotalLoss:
    def test_zero_weights_equal_raw_ncc(self):
        rng = np.random.default_rng(11)
        f = rng.uniform(0, 1, (6, 6, 6)).astype(np.float32)
        m = rng.uniform(0, 1, (6, 6, 6)).astype(np.float32)
        phi = Tensor((0.2 * rng.standard_normal((3, 6, 6, 6))).astype(np.float32),
                     requires_grad=True)
        lw = LossWeights(lambda_smooth=0.0, lambda_diffeo=0.0, ncc_window=5)
        loss, parts = total_loss(f, m, phi, lw)
        assert parts["smooth"] == 0.0 and parts["diffeo"] == 0.0
        assert float(loss.data) == parts["ncc"] == parts["total"]

    def test_parts_sum_to_total(self):
        rng = np.random.default_rng(12)
        f = rng.uniform(0, 1, (6, 6, 6)).astype(np.float32)
        m = rng.uniform(0, 1, (6, 6, 6)).astype(np.float32)
        phi = Tensor((0.2 * rng.standard_normal((3, 6, 6, 6))).astype(np.float32),
                     requires_grad=True)
        lw = LossWeights(lambda_smooth=0.1, lambda_diffeo=1.0, ncc_window=5)
        _, parts = total_loss(f, m, phi, lw)
        want = parts["ncc"] + 0.1 * parts["smooth"] + 1.0 * parts["diffeo"]
        assert abs(parts["total"] - want) < 1e-12

    def test_velocity_path_exponentiates(self):
        # identical velocity through the two entry points must agree
        rng = np.random.default_rng(13)
        f = rng.uniform(0, 1, (6, 6, 6)).astype(np.float32)
        m = rng.uniform(0, 1, (6, 6, 6)).astype(np.float32)
        v = (0.1 * rng.standard_normal((3, 6, 6, 6))).astype(np.float32)
        lw = LossWeights(ncc_window=5)
        from netreg.field import exp_velocity
        _, via_velocity = total_loss(f, m, Tensor(v, requires_grad=True), lw,
                                     field_is_velocity=True, squaring_steps=7)
        _, via_field = total_loss(f, m, Tensor(exp_velocity(v, 7), requires_grad=True), lw)
        assert via_velocity["total"] == via_field["total"]

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_smooth=-0.1).validate()
        with pytest.raises(ValueError):
            LossWeights(lambda_diffeo=float("nan")).validate()
        with pytest.raises(ValueError):
            LossWeights(ncc_window=4).validate()
        with pytest.raises(ValueError):
            LossWeights(ncc_window=-1).validate()
