"""Uniform and inverse-CDF importance sampling of ray parameters.

Everything here is batched over leading axes: ``t`` has shape ``(..., K)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Ray, ray_at
from .transparency import RayQuadrature, RaySamples, ScaleParam, adaptive_coeff, quadrature

TIE_EPS = 1e-12


@dataclass(frozen=True)
class SamplerConfig:
    n_uniform: int = 64
    n_importance: int = 64
    stratified: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_uniform < 1 or self.n_importance < 1:
            raise ValueError("sample counts must be >= 1")


class EmptyRayError(ValueError):
    pass


def ray_generator(seed: int, index: int) -> np.random.Generator:
    """Independent stream for ray ``index`` so serial and parallel runs agree."""
    return np.random.default_rng([int(seed), int(index)])


def stratified_uniform_batch(t_near, t_far, n: int, stratified: bool, rng=None) -> np.ndarray:
    """One draw per equal sub-interval of ``[t_near, t_far]`` (midpoints if not stratified)."""
    t_near = np.asarray(t_near, dtype=float)
    t_far = np.asarray(t_far, dtype=float)
    shape = np.broadcast(t_near, t_far).shape + (n,)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = rng.random(shape)
    else:
        u = np.full(shape, 0.5)
    frac = (np.arange(n) + u) / n
    return t_near[..., None] + (t_far - t_near)[..., None] * frac


def uniform_samples(ray: Ray, cfg: SamplerConfig, rng=None) -> np.ndarray:
    if ray.empty:
        raise EmptyRayError("ray misses the scene bounds")
    return stratified_uniform_batch(ray.t_near, ray.t_far, cfg.n_uniform, cfg.stratified, rng)


def invert_cdf(weights, t, n: int, rng=None, stratified: bool = True):
    """Draw ``n`` positions from the piecewise-constant density over ``t`` bins.

    ``weights`` has one entry per interval (``K-1``).  Returns ``(draws,
    fallback)``; ``fallback`` marks rays whose weights summed to zero and were
    sampled uniformly instead.
    """
    w = np.asarray(weights, dtype=float)
    t = np.asarray(t, dtype=float)
    if w.shape[-1] != t.shape[-1] - 1:
        raise ValueError("need one weight per interval")
    w = np.maximum(w, 0.0)
    total = w.sum(axis=-1, keepdims=True)
    fallback = ~(total[..., 0] > 0)
    w = np.where(fallback[..., None], np.diff(t, axis=-1), w)
    total = w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros_like(total), np.cumsum(w, axis=-1) / total], axis=-1)
    cdf[..., -1] = 1.0

    shape = w.shape[:-1] + (n,)
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        u = (np.arange(n) + rng.random(shape)) / n
    else:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, shape)

    idx = np.sum(cdf[..., None, :] <= u[..., :, None], axis=-1) - 1
    idx = np.clip(idx, 0, w.shape[-1] - 1)
    c0 = np.take_along_axis(cdf, idx, axis=-1)
    c1 = np.take_along_axis(cdf, idx + 1, axis=-1)
    t0 = np.take_along_axis(t, idx, axis=-1)
    t1 = np.take_along_axis(t, idx + 1, axis=-1)
    span = c1 - c0
    frac = np.where(span > 0, (u - c0) / np.where(span > 0, span, 1.0), 0.5)
    return t0 + frac * (t1 - t0), fallback


def merge_sorted(a, b) -> np.ndarray:
    """Sorted union along the last axis, nudging ties apart by ``TIE_EPS``."""
    t = np.sort(np.concatenate([a, b], axis=-1), axis=-1)
    ramp = np.arange(t.shape[-1]) * TIE_EPS
    # t'_i = max(t_i, t'_{i-1} + eps)
    return np.maximum.accumulate(t - ramp, axis=-1) + ramp


def spread_to_bins(point_weights: np.ndarray) -> np.ndarray:
    """Split each per-sample weight evenly between the two bins touching it.

    Quadrature weights sit at the left endpoint of their interval.  When the
    sigmoid is sharper than the sample spacing, the surface lies in the bin
    *before* the heavy sample, so sampling only the bin after it would miss
    the surface.
    """
    w = np.asarray(point_weights, dtype=float)
    nxt = np.concatenate([w[..., 1:], np.zeros_like(w[..., :1])], axis=-1)
    return 0.5 * (w + nxt)


def importance_samples(weights, t, n: int, rng=None, stratified: bool = True):
    """Inverse-CDF draws merged with ``t``; returns ``(t_merged, fallback)``."""
    if isinstance(weights, RayQuadrature):
        weights = np.asarray(weights.weights)
    draws, fallback = invert_cdf(weights, t, n, rng, stratified)
    return merge_sorted(np.asarray(t, dtype=float), draws), fallback


def hierarchical_t(origins, directions, t_near, t_far, field_eval, s: float,
                   cfg: SamplerConfig, rng=None, adaptive: bool = True):
    """Uniform pass, per-ray scale gain, then one importance pass.

    ``field_eval(points (N, 3)) -> (values (N,), gradients (N, 3))``.
    Returns ``(t, c, fallback)`` with ``t`` of shape ``(B, n_uniform +
    n_importance)`` and ``c`` the per-ray gain (ones when not ``adaptive``).
    """
    o = np.atleast_2d(origins)
    d = np.atleast_2d(directions)
    t_u = stratified_uniform_batch(np.atleast_1d(t_near), np.atleast_1d(t_far), cfg.n_uniform,
                                   cfg.stratified, rng)
    B, K = t_u.shape
    pts = o[:, None, :] + t_u[..., None] * d[:, None, :]
    f, g = field_eval(pts.reshape(-1, 3))
    f = np.asarray(f, dtype=float).reshape(B, K)
    g = np.asarray(g, dtype=float).reshape(B, K, 3)
    gd = np.sum(g * d[:, None, :], axis=-1)
    if adaptive:
        c, _ = adaptive_coeff(RaySamples(t_u, f, g, gd), ScaleParam(s))
        c = np.atleast_1d(np.asarray(c, dtype=float))
    else:
        c = np.ones(B)
    # no clamp on s here
    scale = ScaleParam(s, c[:, None])
    q = quadrature(RaySamples(t_u, f, g, gd), scale)
    t, fallback = importance_samples(spread_to_bins(q.weights), t_u, cfg.n_importance, rng,
                                     cfg.stratified)
    return t, c, fallback


def hierarchical_pass(ray: Ray, field, scale: ScaleParam, cfg: SamplerConfig, rng=None,
                      adaptive: bool = True):
    """Single-ray hierarchical sampling; returns ``(RaySamples, c)``.

    ``field`` is anything with ``evaluate(points) -> (values, gradients)``.
    """
    if ray.empty:
        raise EmptyRayError("ray misses the scene bounds")
    t, c, _ = hierarchical_t(ray.origin, ray.direction, ray.t_near, ray.t_far, field.evaluate,
                             float(scale.s), cfg, rng, adaptive)
    t = t[0]
    f, g = field.evaluate(ray_at(ray, t))
    return RaySamples(t, np.asarray(f, dtype=float), np.asarray(g, dtype=float),
                      np.asarray(g, dtype=float) @ ray.direction), float(c[0])
