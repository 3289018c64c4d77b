"""Discrete volume rendering of SDF scenes, plus image I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .geometry import AnalyticSdf, Camera, Ray, camera_rays
from .networks import CompositeSdf, MlpParams, color_forward
from .sampling import SamplerConfig, hierarchical_t
from .transparency import ScaleParam, composite_alpha, density

DEPTH_PNG_SCALE = 1000.0  # 16-bit depth PNG stores round(depth * 1000)
WEIGHT_EPS = 1e-10


@dataclass
class ImageBuffer:
    width: int
    height: int
    rgb: np.ndarray  # (H, W, 3), unclamped
    depth: np.ndarray | None = None
    normal: np.ndarray | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=float).reshape(self.height, self.width, 3)
        if not np.all(np.isfinite(self.rgb)):
            raise ValueError("non-finite rgb values")

    @classmethod
    def filled(cls, width, height, color):
        return cls(width, height, np.broadcast_to(np.asarray(color, float), (height, width, 3)))


# ---------------------------------------------------------------------------
# scenes: anything that can answer (sdf, gradient) and (sdf, gradient, rgb)
# ---------------------------------------------------------------------------

@dataclass
class AnalyticScene:
    """Analytic SDF shaded with a headlight: ``albedo * max(0, -n . d)``."""

    shape: AnalyticSdf
    albedo: object = (0.8, 0.8, 0.8)

    def evaluate(self, points):
        return self.shape.evaluate(np.asarray(points, dtype=float))

    def surface_albedo(self, points):
        if callable(self.albedo):
            return self.albedo(points)
        return np.broadcast_to(np.asarray(self.albedo, dtype=float), points.shape)

    def radiance(self, points, dirs):
        f, g = self.evaluate(points)
        n = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
        shade = np.maximum(0.0, -np.sum(n * dirs, axis=-1, keepdims=True))
        return f, g, self.surface_albedo(points) * shade


@dataclass
class NeuralScene:
    """Composite neural SDF with its color network at a given scale ``s``."""

    sdf: CompositeSdf
    color: MlpParams
    s: object  # float or Var

    def evaluate(self, points):
        return self.sdf.evaluate(points, float(ad.value_of(self.s)))

    def forward(self, points, dirs):
        """Field output and colors; differentiable when a tape is active."""
        out = self.sdf.forward(points, self.s)
        normal = out.grad / (ad.norm(out.grad, keepdims=True) + 1e-12)
        dirs = np.asarray(dirs, dtype=self.sdf.dtype)
        x = points if isinstance(points, ad.Var) else np.asarray(points, dtype=self.sdf.dtype)
        rgb = color_forward(self.color, x, normal, dirs, out.feature)
        return out, rgb

    def radiance(self, points, dirs):
        with ad.isolated():
            out, rgb = self.forward(np.asarray(points), dirs)
        return ad.value_of(out.sdf), ad.value_of(out.grad), ad.value_of(rgb)


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def interval_widths(t: np.ndarray) -> np.ndarray:
    """Forward differences, with the final sample given the mean width."""
    dt = np.diff(t, axis=-1)
    return np.concatenate([dt, dt.mean(axis=-1, keepdims=True)], axis=-1)


def volume_render(t, f, grad_dot_d, rgb, s_eff, background):
    """Composite ``(B, K)`` samples into colors.

    Returns ``(rgb (B, 3), weight_sum (B,), depth (B,), weights (B, K))``.
    ``rgb = sum_i w_i c_i + (1 - sum_i w_i) * background``.
    """
    dtype = np.result_type(ad.value_of(f))
    dt = interval_widths(np.asarray(t)).astype(dtype)
    q = composite_alpha(density(s_eff, f, grad_dot_d), dt)
    w = q.weights
    wsum = ad.sum(w, axis=-1)
    bg = np.asarray(background, dtype=dtype)
    color = ad.sum(ad.reshape(w, w.shape + (1,)) * rgb, axis=-2)
    color = color + ad.reshape(1.0 - wsum, (-1, 1)) * bg
    wv = ad.value_of(w)
    depth = np.sum(wv * t, axis=-1) / np.maximum(wv.sum(axis=-1), WEIGHT_EPS)
    return color, wsum, depth, w


def render_rays(origins, directions, t_near, t_far, scene, scale: ScaleParam,
                cfg: SamplerConfig, background=(1.0, 1.0, 1.0), rng=None,
                adaptive: bool = True, chunk: int = 256):
    """Render a batch of non-empty rays without recording gradients.

    Returns a dict of arrays: ``rgb``, ``weight_sum``, ``depth``, ``normal``,
    ``c`` and ``invalid`` (rays whose field output was not finite).
    """
    B = len(origins)
    out = {"rgb": np.zeros((B, 3)), "weight_sum": np.zeros(B), "depth": np.zeros(B),
           "normal": np.zeros((B, 3)), "c": np.ones(B), "invalid": np.zeros(B, dtype=bool)}
    s = float(ad.value_of(scale.s))
    for a in range(0, B, chunk):
        sl = slice(a, min(a + chunk, B))
        o, d = origins[sl], directions[sl]
        t, c, _ = hierarchical_t(o, d, t_near[sl], t_far[sl], scene.evaluate, s, cfg, rng, adaptive)
        n, K = t.shape
        pts = o[:, None, :] + t[..., None] * d[:, None, :]
        dirs = np.broadcast_to(d[:, None, :], pts.shape).reshape(-1, 3)
        f, g, rgb = scene.radiance(pts.reshape(-1, 3), dirs)
        f = np.asarray(f, dtype=float).reshape(n, K)
        g = np.asarray(g, dtype=float).reshape(n, K, 3)
        rgb = np.asarray(rgb, dtype=float).reshape(n, K, 3)
        gd = np.sum(g * d[:, None, :], axis=-1)
        bad = ~(np.all(np.isfinite(f), axis=-1) & np.all(np.isfinite(g), axis=(-1, -2))
                & np.all(np.isfinite(rgb), axis=(-1, -2)))
        f, g, rgb, gd = (np.where(bad.reshape((-1,) + (1,) * (a_.ndim - 1)), 0.0, a_)
                         for a_ in (f, g, rgb, gd))
        color, wsum, depth, w = volume_render(t, f, gd, rgb, s * c[:, None], background)
        nrm = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
        out["rgb"][sl] = np.where(bad[:, None], background, color)
        out["weight_sum"][sl] = np.where(bad, 0.0, wsum)
        out["depth"][sl] = np.where(bad, 0.0, depth)
        out["normal"][sl] = np.sum(w[..., None] * nrm, axis=1)
        out["c"][sl] = c
        out["invalid"][sl] = bad
    return out


def render_ray(ray: Ray, scene, scale: ScaleParam, cfg: SamplerConfig, rng=None,
               background=(1.0, 1.0, 1.0), adaptive: bool = True):
    """``(rgb, weight_sum, depth)`` for one ray; empty rays give the background."""
    if ray.empty:
        return np.asarray(background, dtype=float), 0.0, 0.0
    r = render_rays(ray.origin[None], ray.direction[None], np.array([ray.t_near]),
                    np.array([ray.t_far]), scene, scale, cfg, background, rng, adaptive)
    return r["rgb"][0], float(r["weight_sum"][0]), float(r["depth"][0])


def render_image(camera: Camera, scene, scale: ScaleParam, cfg: SamplerConfig,
                 background=(1.0, 1.0, 1.0), seed: int = 0, adaptive: bool = True,
                 chunk: int = 256) -> ImageBuffer:
    """Render every pixel; deterministic for a fixed seed."""
    o, d, tn, tf, hit = camera_rays(camera)
    n = len(o)
    rgb = np.broadcast_to(np.asarray(background, float), (n, 3)).copy()
    depth = np.zeros(n)
    normal = np.zeros((n, 3))
    idx = np.flatnonzero(hit)
    rng = np.random.default_rng(seed) if cfg.stratified else None
    if len(idx):
        r = render_rays(o[idx], d[idx], tn[idx], tf[idx], scene, scale, cfg, background, rng,
                        adaptive, chunk)
        rgb[idx], depth[idx], normal[idx] = r["rgb"], r["depth"], r["normal"]
    H, W = camera.height, camera.width
    return ImageBuffer(W, H, rgb.reshape(H, W, 3), depth.reshape(H, W), normal.reshape(H, W, 3))


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

def to_uint8(rgb) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: ImageBuffer) -> None:
    Image.fromarray(to_uint8(image.rgb), "RGB").save(path)


def write_ppm(path, image: ImageBuffer) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode()
    Path(path).write_bytes(header + to_uint8(image.rgb).tobytes())


def write_depth_png(path, image: ImageBuffer) -> None:
    if image.depth is None:
        raise ValueError("image has no depth channel")
    d = np.clip(np.round(image.depth * DEPTH_PNG_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(d).save(path)


def read_image(path) -> ImageBuffer:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0
    h, w, _ = arr.shape
    return ImageBuffer(w, h, arr)
