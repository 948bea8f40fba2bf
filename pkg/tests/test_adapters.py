"""Adapter machinery: fusion against the three-stage pipeline oracle, sine and
linear modulation, Gaussian smoothing of kernels, the clock net, and finite
difference agreement for every analytic backward."""

import math

import numpy as np
import pytest

from freqswitch.numerics import ContractViolation, ConvKernel, RandomStream, conv2d
from freqswitch.adapters import (
    ClockNetParams,
    LowRankFactors,
    MidKernel,
    ModulatedKernel,
    TaskToken,
    clocknet_backward,
    clocknet_forward,
    fuse_awb,
    fuse_backward,
    kernel4d_to_matrix_view,
    linear_scale,
    linear_scale_backward,
    lowpass_backward,
    lowpass_filter,
    matrix_view_to_kernel4d,
    pipeline_apply,
    sine_backward,
    sine_modulate,
)
from freqswitch.analysis import rank_report, vec_correlation


def random_instance(stream, m, n, r, kw):
    f = LowRankFactors(stream.normal((m, r)), stream.normal((n, r)))
    w = MidKernel(stream.normal((r, r, kw, kw)))
    return f, w


def fd_check(loss_fn, arr, analytic, stream, points=20, h=1e-6, tol=1e-5):
    """Central-difference check at sampled coordinates of one tensor."""
    flat, aflat = arr.ravel(), np.asarray(analytic).ravel()
    for idx in stream.permutation(flat.size)[:min(points, flat.size)]:
        orig = flat[idx]
        flat[idx] = orig + h
        lp = loss_fn()
        flat[idx] = orig - h
        lm = loss_fn()
        flat[idx] = orig
        fd = (lp - lm) / (2 * h)
        assert abs(fd - aflat[idx]) / max(abs(fd), abs(aflat[idx]), 1e-8) < tol


class TestFuseAwb:
    def test_identity_factors_identity_mid(self):
        r = 3
        eye = np.eye(r)
        f = LowRankFactors(eye, eye)
        w = MidKernel(eye.reshape(r, r, 1, 1))
        fused = fuse_awb(f, w)
        np.testing.assert_allclose(fused.kernel4d.weights[:, :, 0, 0], eye, atol=1e-15)
        x = RandomStream(0, 1).normal((r, 5, 5))
        np.testing.assert_allclose(conv2d(x, fused.kernel4d), x, atol=1e-14)

    def test_kw1_equals_direct_matrix_product(self):
        s = RandomStream(1, 0)
        f, w = random_instance(s, 6, 5, 2, 1)
        fused = fuse_awb(f, w)
        expected = f.b @ w.w[:, :, 0, 0] @ f.a.T
        np.testing.assert_allclose(fused.kernel4d.weights[:, :, 0, 0], expected, atol=1e-12)

    def test_matches_pipeline_on_random_instance(self):
        s = RandomStream(2, 0)
        f, w = random_instance(s, 6, 5, 2, 3)
        x = s.normal((6, 8, 8))
        gap = np.max(np.abs(conv2d(x, fuse_awb(f, w).kernel4d) - pipeline_apply(f, w, x)))
        assert gap <= 1e-10

    def test_fusion_equivalence_100_instances(self):
        worst = 0.0
        for i in range(100):
            s = RandomStream(1000 + i, 0)
            m, n = int(s.integers(1, 9)), int(s.integers(1, 9))
            r = int(s.integers(1, min(m, n, 4) + 1))
            kw = [1, 3][int(s.integers(0, 2))]
            f, w = random_instance(s, m, n, r, kw)
            x = s.normal((m, 8, 8))
            gap = np.max(np.abs(conv2d(x, fuse_awb(f, w).kernel4d)
                                - pipeline_apply(f, w, x)))
            worst = max(worst, float(gap))
        assert worst <= 1e-10

    def test_rank_mismatch_rejected(self):
        f = LowRankFactors(np.zeros((4, 2)), np.zeros((4, 2)))
        w = MidKernel(np.zeros((3, 3, 1, 1)))
        with pytest.raises(ContractViolation, match="rank"):
            fuse_awb(f, w)

    def test_rank_exceeding_dims_rejected(self):
        with pytest.raises(ContractViolation, match="rank"):
            LowRankFactors(np.zeros((2, 3)), np.zeros((4, 3)))

    def test_matrix_view_bijection(self):
        s = RandomStream(3, 0)
        f, w = random_instance(s, 4, 3, 2, 3)
        fused = fuse_awb(f, w)
        k4 = fused.kernel4d.weights
        mv = fused.matrix_view
        assert mv.shape == (4, 3 * 9)
        np.testing.assert_array_equal(matrix_view_to_kernel4d(mv, 3, 3), k4)
        assert mv[1, 2 * 9 + 1 * 3 + 2] == k4[2, 1, 1, 2]
        assert sorted(mv.ravel()) == sorted(k4.ravel())


class TestPipelineApply:
    def test_identity_pipeline(self):
        r = 3
        f = LowRankFactors(np.eye(r), np.eye(r))
        w = MidKernel(np.eye(r).reshape(r, r, 1, 1))
        x = RandomStream(4, 0).normal((r, 6, 6))
        np.testing.assert_allclose(pipeline_apply(f, w, x), x, atol=1e-14)

    def test_zero_mid_kernel(self):
        s = RandomStream(5, 0)
        f = LowRankFactors(s.normal((4, 2)), s.normal((3, 2)))
        w = MidKernel(np.zeros((2, 2, 3, 3)))
        out = pipeline_apply(f, w, s.normal((4, 5, 5)))
        np.testing.assert_array_equal(out, np.zeros((3, 5, 5)))

    def test_channel_mismatch_rejected(self):
        s = RandomStream(6, 0)
        f, w = random_instance(s, 4, 3, 2, 1)
        with pytest.raises(ContractViolation, match="shape"):
            pipeline_apply(f, w, s.normal((5, 4, 4)))


class TestSineModulate:
    def test_omega_zero_gives_zero_kernel(self):
        s = RandomStream(7, 0)
        fused = fuse_awb(*random_instance(s, 4, 4, 2, 3))
        mk = sine_modulate(fused, 0.0)
        np.testing.assert_array_equal(mk.kernel.weights, np.zeros_like(mk.kernel.weights))

    def test_quarter_period_entry(self):
        f = LowRankFactors(np.array([[math.pi / 2]]), np.array([[1.0]]))
        w = MidKernel(np.ones((1, 1, 1, 1)))
        mk = sine_modulate(fuse_awb(f, w), 1.0)
        assert mk.kernel.weights[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_range_bound(self):
        for i in range(20):
            s = RandomStream(70 + i, 0)
            fused = fuse_awb(*random_instance(s, 6, 5, 3, 3))
            omega = float(s.uniform(-10, 10))
            mk = sine_modulate(fused, omega)
            assert np.max(np.abs(mk.kernel.weights)) <= 1.0
            assert mk.omega == omega
            assert mk.filter_spec is None

    def test_raises_effective_rank_of_rank2_base(self):
        hits = 0
        for seed in range(20):
            s = RandomStream(seed, 77)
            f = LowRankFactors(s.normal((32, 2)), s.normal((32, 2)))
            w = MidKernel(np.eye(2).reshape(2, 2, 1, 1))
            base = fuse_awb(f, w)
            assert rank_report(base.matrix_view).eps_rank == 2
            mk = sine_modulate(base, 3.0)
            if rank_report(mk.matrix_view).eps_rank > 2:
                hits += 1
        assert hits == 20

    def test_sine_not_multiplicative_homomorphic(self):
        # rank(sin(fused(A,W,B))) differs from rank(fused(sin A, sin W, sin B))
        # on at least one seeded instance.
        differs = 0
        for seed in range(20):
            s = RandomStream(seed, 78)
            f, w = random_instance(s, 8, 8, 2, 1)
            fused = fuse_awb(f, w)
            sin_after = np.sin(fused.matrix_view)
            f_sin = LowRankFactors(np.sin(f.a), np.sin(f.b))
            w_sin = MidKernel(np.sin(w.w))
            sin_before = fuse_awb(f_sin, w_sin).matrix_view
            if rank_report(sin_after).eps_rank != rank_report(sin_before).eps_rank:
                differs += 1
        assert differs >= 1


class TestLinearScale:
    def test_omega_one_unchanged(self):
        s = RandomStream(8, 0)
        fused = fuse_awb(*random_instance(s, 4, 4, 2, 3))
        mk = linear_scale(fused, 1.0)
        np.testing.assert_array_equal(mk.kernel.weights, fused.kernel4d.weights)

    def test_omega_zero_zeroes(self):
        s = RandomStream(9, 0)
        fused = fuse_awb(*random_instance(s, 4, 4, 2, 3))
        np.testing.assert_array_equal(linear_scale(fused, 0.0).kernel.weights,
                                      np.zeros_like(fused.kernel4d.weights))

    def test_scalings_perfectly_correlated(self):
        s = RandomStream(10, 0)
        fused = fuse_awb(*random_instance(s, 5, 4, 2, 3))
        corr = vec_correlation(linear_scale(fused, 2.0).kernel.weights,
                               linear_scale(fused, 5.0).kernel.weights)
        assert abs(corr - 1.0) <= 1e-12


class TestLowpassFilter:
    def _from_view(self, view, n, kw, omega=1.0):
        return ModulatedKernel(ConvKernel(matrix_view_to_kernel4d(view, n, kw)), omega)

    def test_constant_interior_preserved(self):
        mk = self._from_view(np.full((12, 36), 0.7), 4, 3)
        out = lowpass_filter(mk, 7, 1.0)
        interior = out.matrix_view[3:-3, 3:-3]
        np.testing.assert_allclose(interior, 0.7, atol=1e-12)
        assert out.filter_spec == (7, 1.0)
        assert out.omega == 1.0

    def test_k1_is_identity(self):
        s = RandomStream(11, 0)
        view = s.normal((8, 27))
        mk = self._from_view(view, 3, 3)
        np.testing.assert_allclose(lowpass_filter(mk, 1, 1.0).matrix_view, view,
                                   atol=1e-15)

    def test_checkerboard_suppression(self):
        rows, cols = np.indices((12, 36))
        checker = np.where((rows + cols) % 2 == 0, 1.0, -1.0)
        out = lowpass_filter(self._from_view(checker, 4, 3), 7, 1.0)
        assert np.max(np.abs(out.matrix_view[3:-3, 3:-3])) < 0.05

    def test_invalid_filter_rejected(self):
        mk = self._from_view(np.zeros((4, 9)) + 1.0, 1, 3)
        with pytest.raises(ContractViolation):
            lowpass_filter(mk, 4, 1.0)
        with pytest.raises(ContractViolation):
            lowpass_filter(mk, 7, -1.0)

    def test_backward_is_adjoint(self):
        s = RandomStream(12, 0)
        x = s.normal((4, 5, 3, 3))
        g = s.normal((4, 5, 3, 3))
        mk = ModulatedKernel(ConvKernel(x), 1.0)
        lhs = float(np.sum(g * lowpass_filter(mk, 7, 1.0).kernel.weights))
        rhs = float(np.sum(x * lowpass_backward(g, 7, 1.0)))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestClockNet:
    def test_nonpositive_token_gives_s_times_c(self):
        p = ClockNetParams(np.full((1, 4), 0.3), s=1.7, c=0.9)
        token = TaskToken(np.array([-1.0, 0.0, -2.0, -0.5]), 0)
        assert clocknet_forward(p, token) == pytest.approx(1.7 * 0.9, abs=1e-15)

    def test_asymptote_never_attained(self):
        p = ClockNetParams(np.ones((1, 2)), s=1.0, c=1.0)
        token = TaskToken(np.array([8.0, 8.0]), 0)   # large but unsaturated preactivation
        omega = clocknet_forward(p, token)
        assert omega < 2.0
        assert omega == pytest.approx(2.0, abs=1e-6)

    def test_scalar_evaluation(self):
        p = ClockNetParams(np.array([[0.5]]), s=1.0, c=1.0)
        token = TaskToken(np.array([1.0]), 0)
        assert clocknet_forward(p, token) == pytest.approx(1.4621171572600098, abs=1e-12)

    def test_frequency_bound(self):
        for i in range(200):
            s = RandomStream(300 + i, 0)
            dim = int(s.integers(1, 9))
            p = ClockNetParams(s.normal((1, dim)), float(s.uniform(0.1, 3.0)),
                               float(s.uniform(-2, 2)))
            token = TaskToken(s.normal(dim), 0)
            omega = clocknet_forward(p, token)
            assert abs(omega - p.s * p.c) < abs(p.s)

    def test_width_mismatch_rejected(self):
        p = ClockNetParams(np.zeros((1, 3)), 1.0, 0.0)
        with pytest.raises(ContractViolation, match="width"):
            clocknet_forward(p, TaskToken(np.zeros(4), 0))

    def test_zero_scale_rejected_at_construction(self):
        with pytest.raises(ContractViolation, match="nonzero"):
            ClockNetParams(np.zeros((1, 2)), 0.0, 1.0)


class TestBackwardPasses:
    def test_sine_backward_at_omega_zero(self):
        s = RandomStream(13, 0)
        fused = fuse_awb(*random_instance(s, 4, 3, 2, 3))
        up = s.normal(fused.kernel4d.weights.shape)
        grad_base, grad_omega = sine_backward(fused, 0.0, up)
        np.testing.assert_array_equal(grad_base, np.zeros_like(up))
        assert grad_omega == pytest.approx(float(np.sum(up * fused.kernel4d.weights)),
                                           rel=1e-12)

    def test_sine_backward_at_zero_base(self):
        f = LowRankFactors(np.zeros((3, 2)), np.zeros((3, 2)))
        w = MidKernel(np.ones((2, 2, 1, 1)))
        fused = fuse_awb(f, w)
        up = RandomStream(14, 0).normal((3, 3, 1, 1))
        grad_base, grad_omega = sine_backward(fused, 1.5, up)
        np.testing.assert_allclose(grad_base, 1.5 * up, atol=1e-15)
        assert grad_omega == 0.0

    def test_sine_backward_shape_mismatch(self):
        s = RandomStream(15, 0)
        fused = fuse_awb(*random_instance(s, 4, 3, 2, 3))
        with pytest.raises(ContractViolation, match="shape"):
            sine_backward(fused, 1.0, np.zeros((1, 2, 3, 3)))

    def test_sine_backward_matches_fd(self):
        s = RandomStream(16, 0)
        f, w = random_instance(s, 5, 4, 2, 3)
        up = s.normal((4, 5, 3, 3))
        omega = np.array([1.3])

        def loss():
            return float(np.sum(up * np.sin(omega[0] * fuse_awb(f, w).kernel4d.weights)))

        fused = fuse_awb(f, w)
        gk, go = sine_backward(fused, float(omega[0]), up)
        ga, gb, gw = fuse_backward(f, w, gk)
        for arr, an in ((f.a, ga), (f.b, gb), (w.w, gw), (omega, np.array([go]))):
            fd_check(loss, arr, an, s.substream(1))

    def test_linear_scale_backward_matches_fd(self):
        s = RandomStream(17, 0)
        f, w = random_instance(s, 5, 4, 2, 3)
        up = s.normal((4, 5, 3, 3))
        omega = np.array([2.1])

        def loss():
            return float(np.sum(up * (omega[0] * fuse_awb(f, w).kernel4d.weights)))

        fused = fuse_awb(f, w)
        gk, go = linear_scale_backward(fused, float(omega[0]), up)
        ga, gb, gw = fuse_backward(f, w, gk)
        for arr, an in ((f.a, ga), (f.b, gb), (w.w, gw), (omega, np.array([go]))):
            fd_check(loss, arr, an, s.substream(1))

    def test_clocknet_backward_nonpositive_token(self):
        p = ClockNetParams(np.full((1, 3), 0.4), s=1.2, c=0.7)
        token = TaskToken(np.array([-1.0, -0.1, 0.0]), 0)
        g = clocknet_backward(p, token, grad_omega=2.0)
        np.testing.assert_array_equal(g.w_q, np.zeros((1, 3)))
        np.testing.assert_array_equal(g.token, np.zeros(3))
        assert g.s == pytest.approx(0.7 * 2.0, abs=1e-15)   # (tanh(0)+c)*grad
        assert g.c == pytest.approx(1.2 * 2.0, abs=1e-15)   # s*grad

    def test_clocknet_backward_zero_upstream(self):
        s = RandomStream(18, 0)
        p = ClockNetParams(s.normal((1, 4)), 1.1, 0.2)
        token = TaskToken(s.normal(4), 0)
        g = clocknet_backward(p, token, 0.0)
        np.testing.assert_array_equal(g.w_q, np.zeros((1, 4)))
        np.testing.assert_array_equal(g.token, np.zeros(4))
        assert g.s == 0.0 and g.c == 0.0

    def test_clocknet_backward_matches_fd(self):
        s = RandomStream(19, 0)
        wq = s.normal((1, 5), sigma=0.5)
        s_arr, c_arr = np.array([1.4]), np.array([0.3])
        token = TaskToken(s.normal(5), 0)
        u = 1.7

        def loss():
            return u * clocknet_forward(
                ClockNetParams(wq, float(s_arr[0]), float(c_arr[0])), token)

        g = clocknet_backward(ClockNetParams(wq, float(s_arr[0]), float(c_arr[0])),
                              token, u)
        for arr, an in ((wq, g.w_q), (s_arr, np.array([g.s])),
                        (c_arr, np.array([g.c])), (token.values, g.token)):
            fd_check(loss, arr, an, s.substream(2))

    def test_fuse_backward_zero_upstream(self):
        s = RandomStream(20, 0)
        f, w = random_instance(s, 4, 3, 2, 3)
        ga, gb, gw = fuse_backward(f, w, np.zeros((3, 4, 3, 3)))
        assert not ga.any() and not gb.any() and not gw.any()

    def test_fuse_backward_scalar_product_rule(self):
        a, b, wv, g = 1.3, -0.7, 2.1, 0.9
        f = LowRankFactors(np.array([[a]]), np.array([[b]]))
        w = MidKernel(np.array([[[[wv]]]]))
        ga, gb, gw = fuse_backward(f, w, np.array([[[[g]]]]))
        assert ga[0, 0] == pytest.approx(g * b * wv, rel=1e-12)
        assert gb[0, 0] == pytest.approx(g * a * wv, rel=1e-12)
        assert gw[0, 0, 0, 0] == pytest.approx(g * a * b, rel=1e-12)

    def test_fuse_backward_shape_mismatch(self):
        s = RandomStream(21, 0)
        f, w = random_instance(s, 4, 3, 2, 3)
        with pytest.raises(ContractViolation, match="shape"):
            fuse_backward(f, w, np.zeros((4, 3, 3, 3)))

    def test_lowpass_backward_matches_fd(self):
        s = RandomStream(22, 0)
        weights = s.normal((3, 4, 3, 3))
        up = s.normal((3, 4, 3, 3))

        def loss():
            mk = ModulatedKernel(ConvKernel(weights), 1.0)
            return float(np.sum(up * lowpass_filter(mk, 7, 1.0).kernel.weights))

        fd_check(loss, weights, lowpass_backward(up, 7, 1.0), s.substream(3))


class TestViewHelpers:
    def test_view_roundtrip_random(self):
        s = RandomStream(23, 0)
        k4 = s.normal((5, 3, 3, 3))
        mv = kernel4d_to_matrix_view(k4)
        assert mv.shape == (3, 45)
        np.testing.assert_array_equal(matrix_view_to_kernel4d(mv, 5, 3), k4)
