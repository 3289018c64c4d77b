"""Reverse-mode tape: per-op gradients, higher order and bookkeeping."""

import numpy as np
import numpy.testing as npt
import pytest

from sdfrender import autodiff as ad
from sdfrender.autodiff import GradientTape, TapeError, Var

from oracles import central_diff, rel_err


def _grad(fn, x0):
    x = Var(np.array(x0, dtype=float), requires_grad=True)
    with GradientTape() as tape:
        y = fn(x)
    (g,) = tape.gradient(y, [x])
    return g


UNARY = {
    "exp": lambda x: ad.sum(ad.exp(x)),
    "log": lambda x: ad.sum(ad.log(x)),
    "sin": lambda x: ad.sum(ad.sin(x) * x),
    "cos": lambda x: ad.sum(ad.cos(x * 2.0)),
    "sqrt": lambda x: ad.sum(ad.sqrt(x)),
    "sigmoid": lambda x: ad.sum(ad.sigmoid(3.0 * x) ** 2),
    "softplus": lambda x: ad.sum(ad.softplus(x, 100.0) * x),
    "div": lambda x: ad.sum(1.0 / (x + 2.0)),
    "power": lambda x: ad.sum(x ** 3),
    "abs": lambda x: ad.sum(ad.abs(x - 0.05)),
    "norm": lambda x: ad.sum(ad.norm(ad.reshape(x, (2, 3)))),
    "cumsum": lambda x: ad.sum(ad.cumsum(x, exclusive=True) * np.arange(6.0)),
    "minimum": lambda x: ad.sum(ad.minimum_const(x, 0.85) * x),
    "mean": lambda x: ad.mean(x * x),
    "getitem": lambda x: ad.sum(x[1:4] * x[:3]),
    "concat": lambda x: ad.sum(ad.concat([x, x * x]) * np.arange(12.0)),
}


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_matches_central_difference(self, name):
        fn = UNARY[name]
        x0 = np.array([0.3, 0.7, 1.1, 1.4, 0.2, 0.9])
        g = _grad(fn, x0)
        fd = central_diff(lambda x: float(ad.value_of(fn(x))), x0)
        assert rel_err(g, fd) < 1e-6

    def test_matmul_and_broadcast_add(self):
        rng = np.random.default_rng(0)
        W0, b0, X = rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=(5, 4))
        W, b = Var(W0, requires_grad=True), Var(b0, requires_grad=True)
        with GradientTape() as tape:
            y = ad.sum(ad.sin(X @ W + b))
        gW, gb = tape.gradient(y, [W, b])
        npt.assert_allclose(gW, central_diff(lambda w: np.sin(X @ w + b0).sum(), W0), atol=1e-8)
        npt.assert_allclose(gb, central_diff(lambda v: np.sin(X @ W0 + v).sum(), b0), atol=1e-8)

    def test_relu_and_where(self):
        x0 = np.array([-1.0, 0.5, 2.0])
        npt.assert_array_equal(_grad(lambda x: ad.sum(ad.relu(x)), x0), [0, 1, 1])
        g = _grad(lambda x: ad.sum(ad.where(x0 > 0, x * x, -x)), x0)
        npt.assert_array_equal(g, [-1.0, 1.0, 4.0])

    def test_norm_at_zero_has_zero_gradient(self):
        g = _grad(lambda x: ad.sum(ad.norm(ad.reshape(x, (1, 3)))), np.zeros(3))
        npt.assert_array_equal(g, 0.0)

    def test_sigmoid_tails_are_exact(self):
        v = ad.sigmoid(np.array([-800.0, 0.0, 800.0]))
        npt.assert_array_equal(v, [0.0, 0.5, 1.0])
        assert ad.sigmoid(np.array([-40.0]))[0] == pytest.approx(np.exp(-40.0), rel=1e-15)

    def test_softplus_large_inputs(self):
        with np.errstate(over="raise"):
            v = ad.softplus(np.array([-1e4, 1e4]), 100.0)
        npt.assert_allclose(v, [0.0, 1e4])


class TestHigherOrder:
    def test_second_derivative(self):
        x0 = np.array([0.4, -0.2])
        x = Var(x0, requires_grad=True)
        with GradientTape() as tape:
            y = ad.sum(ad.sin(x) * x * x)
            (g,) = tape.gradient(y, [x], create_graph=True)
            z = ad.sum(g)
        (h,) = tape.gradient(z, [x])
        expected = 2 * np.sin(x0) + 4 * x0 * np.cos(x0) - x0 ** 2 * np.sin(x0)
        npt.assert_allclose(h, expected, rtol=1e-12)

    def test_softplus_second_order(self):
        x0 = np.array([-0.01, 0.003, 0.02])
        beta = 100.0
        x = Var(x0, requires_grad=True)
        with GradientTape() as tape:
            (g,) = tape.gradient(ad.sum(ad.softplus(x, beta)), [x], create_graph=True)
            z = ad.sum(g * g)
        (h,) = tape.gradient(z, [x])
        sig = 1 / (1 + np.exp(-beta * x0))
        npt.assert_allclose(h, 2 * sig * beta * sig * (1 - sig), rtol=1e-10)

    def test_mixed_parameter_gradient_of_spatial_gradient(self):
        # d/dw of |d/dx tanh-like(w x)|^2 through the tape
        w0 = 1.7
        w = Var(np.array(w0), requires_grad=True)
        x = Var(np.array([0.3, -0.5]), requires_grad=True)

        def loss(wv):
            wv = Var(np.array(wv), requires_grad=True)
            xx = Var(np.array([0.3, -0.5]), requires_grad=True)
            with GradientTape() as t:
                f = ad.sum(ad.sigmoid(wv * xx))
                (gx,) = t.gradient(f, [xx], create_graph=True)
                L = ad.sum(gx * gx)
            return t, L, wv

        t, L, wv = loss(w0)
        (gw,) = t.gradient(L, [wv])

        def value(wf):
            s = 1 / (1 + np.exp(-wf * np.array([0.3, -0.5])))
            return float(np.sum((wf * s * (1 - s)) ** 2))

        assert rel_err(gw, central_diff(lambda a: value(float(a)), np.array(w0))) < 1e-6
        del w, x


class TestTapeBookkeeping:
    def test_shared_subexpression_accumulates(self):
        g = _grad(lambda x: ad.sum(x * x + x), np.array([2.0]))
        npt.assert_array_equal(g, [5.0])

    def test_unused_source_gets_zeros(self):
        a, b = Var(np.ones(2), requires_grad=True), Var(np.ones(3), requires_grad=True)
        with GradientTape() as tape:
            y = ad.sum(a * 2.0)
        ga, gb = tape.gradient(y, [a, b])
        npt.assert_array_equal(ga, 2.0)
        npt.assert_array_equal(gb, 0.0)

    def test_plain_arrays_pass_through(self):
        assert isinstance(ad.exp(np.zeros(2)), np.ndarray)

    def test_no_record(self):
        x = Var(np.ones(2), requires_grad=True)
        with GradientTape() as tape:
            with ad.no_record():
                y = ad.sum(x * 3.0)
        assert tape.nodes == []
        assert isinstance(y, Var)

    def test_stop_gradient(self):
        g = _grad(lambda x: ad.sum(ad.stop_gradient(x) * x), np.array([3.0]))
        npt.assert_array_equal(g, [3.0])

    def test_bad_seed_shape(self):
        x = Var(np.ones(3), requires_grad=True)
        with GradientTape() as tape:
            y = x * 2.0
        with pytest.raises(TapeError):
            tape.gradient(y, [x], output_grad=np.ones(2))
        with pytest.raises(TapeError):
            tape.gradient(np.ones(3), [x])

    def test_replay_is_bit_exact(self):
        x = Var(np.linspace(0, 1, 7), requires_grad=True)
        with GradientTape() as tape:
            ad.sum(ad.softplus(ad.sin(x) * 3.0, 100.0) + ad.cumsum(x))
        assert tape.replay()

    def test_replay_detects_tampering(self):
        x = Var(np.linspace(0, 1, 7), requires_grad=True)
        with GradientTape() as tape:
            y = ad.exp(x)
        y.value = y.value + 1.0
        assert not tape.replay()

    def test_broadcast_gradient_shapes(self):
        b = Var(np.zeros(3), requires_grad=True)
        with GradientTape() as tape:
            y = ad.sum(np.ones((4, 3)) + b)
        (g,) = tape.gradient(y, [b])
        npt.assert_array_equal(g, [4.0, 4.0, 4.0])


class TestFlushTiny:
    def test_zeroes_only_below_threshold(self):
        info = np.finfo(np.float32)
        thr = info.tiny / info.eps
        x = np.full(ad.FLUSH_MIN_SIZE, 0.5, dtype=np.float32)
        x[:4] = [thr / 2, -thr / 2, thr * 2, 1e-30]
        y = ad.flush_tiny(x)
        npt.assert_array_equal(y[:4], np.array([0.0, 0.0, thr * 2, 1e-30], np.float32))
        npt.assert_array_equal(y[4:], x[4:])
        assert x[0] == np.float32(thr / 2)  # input untouched

    def test_small_arrays_untouched(self):
        x = np.array([1e-320, 1.0])
        assert ad.flush_tiny(x) is x

    def test_matmul_unchanged_on_normal_operands(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(128, 64)), rng.normal(size=(64, 8))
        npt.assert_array_equal(ad.matmul(a, b), a @ b)

    def test_replay_after_flush(self):
        a = np.full((128, 64), 1e-300)
        a[0] = 1.0
        x = Var(a, requires_grad=True)
        with GradientTape() as tape:
            y = ad.matmul(x, np.ones((64, 2)))
        npt.assert_array_equal(y.value[1:], 0.0)
        assert tape.replay()
