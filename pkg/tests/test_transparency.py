"""Transparency, density, discrete compositing and the per-ray scale gain."""

import mpmath
import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from sdfrender.transparency import (EmptyQuadratureError, RaySamples, ScaleParam,
                                    adaptive_coeff, psi, psi_prime, quadrature, sigma,
                                    transparency)


def _plane_samples(t, t_s):
    """Ray hitting the plane f = t_s - t head-on (grad f . d = -1)."""
    t = np.asarray(t, dtype=float)
    f = t_s - t
    grad = np.broadcast_to([0.0, 0.0, -1.0], t.shape + (3,))
    return RaySamples(t, f, grad, -np.ones_like(t))


def _psi_mp(s, f):
    mpmath.mp.dps = 50
    return float(1 / (1 + mpmath.exp(-mpmath.mpf(s) * mpmath.mpf(f))))


class TestPsi:
    @pytest.mark.parametrize("s", [0.1, 1.0, 37.0, 1e4])
    def test_half_at_zero(self, s):
        assert psi(s, 0.0) == 0.5

    def test_limits(self):
        assert psi(1.0, 1e6) == 1.0
        assert psi(1.0, -1e6) == 0.0

    def test_high_precision_value(self):
        assert psi(100.0, 0.1) == pytest.approx(_psi_mp(100, 0.1), rel=1e-15)
        assert psi(100.0, 0.1) == pytest.approx(0.9999546, abs=1e-7)

    def test_no_overflow_for_huge_arguments(self):
        with np.errstate(over="raise"):
            v = psi(1e5, np.array([-1e3, 1e3]))
        npt.assert_array_equal(v, [0.0, 1.0])

    @given(st.floats(0.01, 1e3), st.floats(-10, 10), st.floats(-10, 10))
    def test_monotone_in_f(self, s, a, b):
        lo, hi = min(a, b), max(a, b)
        assert psi(s, lo) <= psi(s, hi)
        assert 0.0 <= psi(s, lo) <= 1.0


class TestPsiPrime:
    def test_peak(self):
        assert psi_prime(4.0, 0.0) == 1.0

    def test_saturation(self):
        assert psi_prime(3.0, 1e6) == 0.0
        assert psi_prime(3.0, -1e6) == 0.0

    def test_matches_finite_difference(self):
        h = 1e-6
        fd = (psi(2.0, 0.3 + h) - psi(2.0, 0.3 - h)) / (2 * h)
        assert abs(psi_prime(2.0, 0.3) - fd) < 1e-7

    @given(st.floats(0.01, 1e3), st.floats(-5, 5))
    def test_closed_form(self, s, f):
        mpmath.mp.dps = 50
        e = mpmath.exp(-mpmath.mpf(s) * mpmath.mpf(f))
        expected = float(mpmath.mpf(s) * e / (1 + e) ** 2)
        assert psi_prime(s, f) == pytest.approx(expected, rel=1e-9, abs=1e-300)


class TestTransparencyAndSigma:
    def test_half_on_surface(self):
        assert transparency(ScaleParam(5.0), 0.0) == 0.5

    def test_identity_coefficient(self):
        f = np.linspace(-1, 1, 11)
        npt.assert_array_equal(transparency(ScaleParam(7.0, 1.0), f), psi(7.0, f))

    def test_gain_multiplies_s(self):
        assert transparency(ScaleParam(1.0, np.e), 1.0) == psi(np.e, 1.0)

    def test_sigma_value(self):
        assert sigma(ScaleParam(1.0), 1.0, -1.0) == pytest.approx(1 - _psi_mp(1, 1), rel=1e-14)
        assert sigma(ScaleParam(1.0), 1.0, -1.0) == pytest.approx(0.26894, abs=1e-5)

    def test_tangential_ray(self):
        assert sigma(ScaleParam(3.0), 0.2, 0.0) == 0.0

    def test_deep_inside(self):
        assert sigma(ScaleParam(1.0), -1e3, -1.0) == 1.0

    def test_negative_on_exit(self):
        assert sigma(ScaleParam(2.0), -0.1, 1.0) < 0

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            ScaleParam(0.0)
        with pytest.raises(ValueError):
            ScaleParam(1.0, -1.0)


class TestContinuousConsistency:
    @pytest.mark.parametrize("s", [1.0, 10.0, 100.0])
    def test_exp_integral_of_sigma_is_psi(self, s):
        t_s = 1.3
        sig = lambda t: float(sigma(ScaleParam(s), t_s - t, -1.0))
        for t in np.linspace(0.0, 2.5, 9):
            integral, _ = integrate.quad(sig, 0.0, t, points=[t_s] if t > t_s else None,
                                         epsabs=1e-12, epsrel=1e-12, limit=200)
            # T(0) = psi(f(0)); exp(-int sigma) is T(t)/T(0)
            T = psi(s, t_s - 0.0) * np.exp(-integral)
            assert abs(T - psi(s, t_s - t)) < 1e-4

    def test_transparency_derivative_is_minus_T_sigma(self):
        s, t_s, h = 8.0, 0.7, 1e-6
        for t in np.linspace(0.2, 1.2, 7):
            T = lambda u: psi(s, t_s - u)
            dT = (T(t + h) - T(t - h)) / (2 * h)
            assert abs(dT + T(t) * sigma(ScaleParam(s), t_s - t, -1.0)) < 1e-4


class TestQuadrature:
    def test_zero_sigma(self):
        t = np.linspace(0, 1, 5)
        q = quadrature(RaySamples(t, np.zeros(5), None, np.zeros(5)), ScaleParam(1.0))
        npt.assert_array_equal(q.alpha, 0.0)
        npt.assert_array_equal(q.T, 1.0)
        npt.assert_array_equal(q.weights, 0.0)

    def test_ln2_step(self):
        # deep inside the surface sigma = s; choose dt so sigma dt = ln 2
        s = 2.0
        dt = np.log(2.0) / s
        t = np.array([0.0, dt, 2 * dt])
        q = quadrature(RaySamples(t, np.full(3, -1e3), None, -np.ones(3)), ScaleParam(s))
        assert q.alpha[0] == pytest.approx(0.5, rel=1e-14)
        assert q.T[1] == pytest.approx(0.5, rel=1e-14)
        assert q.T[0] == 1.0

    def test_too_few_samples(self):
        with pytest.raises(EmptyQuadratureError):
            RaySamples(np.array([0.0]), np.array([0.0]))

    def test_descending_t_rejected(self):
        with pytest.raises(ValueError):
            RaySamples(np.array([0.0, 0.0, 1.0]), np.zeros(3))

    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=40), st.floats(0.1, 500),
           st.lists(st.floats(-1, 1), min_size=40, max_size=40))
    @settings(max_examples=200)
    def test_invariants(self, fs, s, gds):
        k = len(fs)
        t = np.linspace(0.0, 2.0, k)
        q = quadrature(RaySamples(t, np.array(fs), None, np.array(gds[:k])), ScaleParam(s))
        a, T, w = np.asarray(q.alpha), np.asarray(q.T), np.asarray(q.weights)
        assert np.all((a >= 0) & (a <= 1))
        assert T[0] == 1.0
        assert np.all(np.diff(T) <= 0)
        npt.assert_allclose(T[1:], T[:-1] * (1 - a[:-1]), rtol=0, atol=1e-14)
        assert w.sum() <= 1 + 1e-6

    def test_last_interval_option(self):
        t = np.linspace(0, 1, 6)
        smp = _plane_samples(t, 0.5)
        assert len(quadrature(smp, ScaleParam(10.0)).alpha) == 5
        assert len(quadrature(smp, ScaleParam(10.0), last_interval=0.2).alpha) == 6

    @pytest.mark.parametrize("s", [10.0, 100.0])
    def test_argmax_near_plane_hit(self, s):
        t_s = 1.2345
        t = np.linspace(0.0, 3.0, 1024)
        w = np.asarray(quadrature(_plane_samples(t, t_s), ScaleParam(s)).weights)
        # dense-grid oracle: -T'(t) = psi'(t_s - t) peaks at t_s
        assert abs(t[np.argmax(w)] - t_s) <= t[1] - t[0]


class TestAdaptiveCoeff:
    def _samples(self, norms, f=None):
        k = len(norms)
        t = np.linspace(0, 1, k)
        f = np.linspace(0.5, -0.5, k) if f is None else f
        grad = np.zeros((k, 3))
        grad[:, 2] = norms
        return RaySamples(t, f, grad, -np.asarray(norms, dtype=float))

    def test_unit_gradients_give_one(self):
        c, sat = adaptive_coeff(self._samples(np.ones(64)), ScaleParam(20.0))
        assert c == 1.0 and not sat

    def test_double_gradients_give_e(self):
        c, _ = adaptive_coeff(self._samples(np.full(64, 2.0)), ScaleParam(20.0))
        assert c == pytest.approx(np.e, rel=1e-15)

    def test_mixed_norms(self):
        # f chosen so the two psi' weights are 3:1
        s = 1.0
        f0 = 0.0
        target = 0.25 / 3  # psi'(s, f1) = psi'(s, 0) / 3
        f1 = float(mpmath.findroot(lambda x: s * mpmath.exp(-x) / (1 + mpmath.exp(-x)) ** 2
                                   - target, 2.0))
        smp = RaySamples(np.array([0.0, 1.0]), np.array([f0, f1]),
                         np.array([[0, 0, 1.0], [0, 0, 3.0]]), np.array([-1.0, -3.0]))
        c, _ = adaptive_coeff(smp, ScaleParam(s))
        assert c == pytest.approx(np.exp(0.5), rel=1e-12)

    def test_saturated_ray_warns(self):
        smp = self._samples(np.ones(4), f=np.full(4, 1e6))
        with pytest.warns(RuntimeWarning):
            c, sat = adaptive_coeff(smp, ScaleParam(1.0))
        assert c == 1.0 and sat

    def test_uses_global_s(self):
        smp = self._samples(np.linspace(1, 2, 16))
        a, _ = adaptive_coeff(smp, ScaleParam(5.0, 1.0))
        b, _ = adaptive_coeff(smp, ScaleParam(5.0, 3.0))
        assert a == b

    def test_adaptive_neutrality_for_eikonal_field(self):
        t = np.linspace(0, 2, 128)
        smp = _plane_samples(t, 1.1)
        c, _ = adaptive_coeff(smp, ScaleParam(30.0))
        base = quadrature(smp, ScaleParam(30.0))
        adapted = quadrature(smp, ScaleParam(30.0).with_coeff(c))
        npt.assert_array_equal(base.weights, adapted.weights)
