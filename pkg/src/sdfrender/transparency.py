"""Transparency modeled as a sigmoid of the signed distance.

Along a ray ``r(t) = o + t d`` the transmittance is ``T(t) = Psi_s(f(r(t)))``
with the logistic ``Psi_s(f) = 1 / (1 + exp(-s f))``.  Differentiating gives
the density

    sigma = -T'/T = s (Psi_s(f) - 1) (grad f . d)

which is what the discrete alpha-composition consumes.  A per-ray gain ``c``
multiplies ``s`` wherever the field's gradient norm deviates from one.

The functions accept plain arrays or autodiff ``Var`` objects.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ScaleParam:
    s: float
    adaptive_coeff: float | np.ndarray = 1.0

    def __post_init__(self):
        if not np.all(np.asarray(ad.value_of(self.s)) > 0):
            raise ValueError("scale s must be positive")
        if not np.all(np.asarray(self.adaptive_coeff) > 0):
            raise ValueError("adaptive coefficient must be positive")

    @property
    def effective(self):
        return self.s * self.adaptive_coeff

    def with_coeff(self, c) -> "ScaleParam":
        return replace(self, adaptive_coeff=c)


@dataclass(frozen=True)
class RaySamples:
    t: np.ndarray
    f: np.ndarray
    grad: np.ndarray | None = None
    grad_dot_d: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.t)
        if t.shape[-1] < 2:
            raise EmptyQuadratureError("need at least two samples per ray")
        if np.any(np.diff(t, axis=-1) <= 0):
            raise ValueError("sample positions must be strictly ascending")
        if np.shape(ad.value_of(self.f)) != t.shape:
            raise ValueError("f and t lengths differ")


@dataclass(frozen=True)
class RayQuadrature:
    alpha: object
    T: object
    weights: object


class EmptyQuadratureError(ValueError):
    pass


def psi(s, f):
    """Logistic sigmoid ``1 / (1 + exp(-s f))`` (overflow-safe for any ``s f``)."""
    return ad.sigmoid(s * f)


def psi_prime(s, f):
    """Derivative ``s Psi (1 - Psi)``; peaks at ``s / 4`` on the surface."""
    # written as s e / (1 + e)^2 with e = exp(-|s f|) so tails don't round to 0
    e = ad.exp(-ad.abs(s * f))
    return s * e / ((1.0 + e) * (1.0 + e))


def psi_second(s, f):
    """``d/df`` of :func:`psi_prime`: ``s^2 Psi (1 - Psi) (1 - 2 Psi)``."""
    p = psi(s, f)
    return s * s * p * (1.0 - p) * (1.0 - 2.0 * p)


def transparency(scale: ScaleParam, f):
    return psi(scale.effective, f)


def sigma(scale: ScaleParam, f, grad_dot_d):
    """Volume density; negative where the ray exits a surface."""
    return density(scale.effective, f, grad_dot_d)


def density(s_eff, f, grad_dot_d):
    """``s (Psi_s(f) - 1) (grad f . d)`` for an already-effective scale."""
    return s_eff * (psi(s_eff, f) - 1.0) * grad_dot_d


def quadrature(samples: RaySamples, scale: ScaleParam, last_interval=None) -> RayQuadrature:
    """Discrete alpha-composition over the sample intervals.

    ``alpha_i = clamp(1 - exp(-sigma_i (t_{i+1} - t_i)), 0, 1)`` with sigma at
    the interval's left endpoint.  Without ``last_interval`` there are ``K-1``
    intervals; with it the final sample gets that width and there are ``K``.
    Batched over leading axes.
    """
    t = np.asarray(samples.t)
    if t.shape[-1] < 2:
        raise EmptyQuadratureError("need at least two samples per ray")
    dt = np.diff(t, axis=-1)
    f, gd = samples.f, samples.grad_dot_d
    if last_interval is None:
        f = f[..., :-1]
        gd = gd[..., :-1]
    else:
        dt = np.concatenate([dt, np.broadcast_to(last_interval, dt[..., :1].shape)], axis=-1)
    return composite_alpha(sigma(scale, f, gd), dt)


def composite_alpha(sig, dt) -> RayQuadrature:
    # clamp(1 - exp(-x), 0, 1) == 1 - exp(-max(x, 0)) for finite x, which also
    # lets T_i = exp(-sum_{j<i} max(x_j, 0)) stay exact where alpha_j == 1
    optical = ad.relu(sig * dt)
    alpha = 1.0 - ad.exp(-optical)
    T = ad.exp(-ad.cumsum(optical, axis=-1, exclusive=True))
    return RayQuadrature(alpha, T, T * alpha)


def adaptive_coeff(samples: RaySamples, scale: ScaleParam):
    """Per-ray gain ``c = exp(sum_i w_i |grad f_i| - 1)`` on the scale.

    Weights ``w_i`` are ``Psi'_s(f_i)`` normalized along the ray, using the
    global ``s`` (not the adaptive one).  Returns ``(c, saturated)`` where
    ``saturated`` marks rays whose weights all vanished (``c`` set to 1).
    """
    f = np.asarray(ad.value_of(samples.f), dtype=float)
    gnorm = np.linalg.norm(np.asarray(ad.value_of(samples.grad), dtype=float), axis=-1)
    s = float(np.asarray(ad.value_of(scale.s)))
    w = psi_prime(s, f)
    total = w.sum(axis=-1)
    saturated = ~(total > 0)
    mean_norm = (w * gnorm).sum(axis=-1) / np.where(saturated, 1.0, total)
    c = np.where(saturated, 1.0, np.exp(mean_norm - 1.0))
    if np.any(saturated):
        warnings.warn(f"{int(np.sum(saturated))} ray(s) with all-saturated weights; c set to 1",
                      RuntimeWarning, stacklevel=2)
    if c.ndim == 0:
        return float(c), bool(saturated)
    return c, saturated
