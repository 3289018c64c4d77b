"""Synthetic multi-view datasets rendered from analytic scenes.

On disk a dataset is a directory::

    cameras.txt        one camera per line (see geometry.write_cameras)
    images/0000.png    8-bit RGB, one per camera, same order
    gt_mesh.obj        ground-truth surface
    spec.cfg           the scene spec it was generated from
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as config_mod
from .config import Config
from .geometry import (SCENE_RADIUS, AnalyticSdf, Camera, camera_rays, format_shape,
                       intrinsics_from_fov, look_at, parse_shape, read_cameras, write_cameras)
from .meshing import TriMesh, marching_cubes, read_obj, write_obj
from .renderer import ImageBuffer, read_image, write_png

SCENE_KEYS = ["scene.shape", "scene.albedo", "scene.checker", "scene.background",
              "scene.views", "scene.resolution", "scene.fov", "scene.camera_radius",
              "scene.seed", "scene.gt_resolution", "mesh.bound"]

TRACE_SAFETY = 0.6  # step = safety * f; < 1 because non-exact SDFs overshoot otherwise
TRACE_MAX_STEPS = 256
TRACE_HIT_EPS = 1e-6
BOUNDS_CHECK_POINTS = 4096


class ShapeOutOfBoundsError(ValueError):
    pass


@dataclass
class SceneSpec:
    shape: AnalyticSdf
    albedo: tuple = (0.8, 0.8, 0.8)
    checker: float = 0.0  # checker period; 0 gives a constant albedo
    background: tuple = (1.0, 1.0, 1.0)

    def surface_albedo(self, points: np.ndarray) -> np.ndarray:
        base = np.broadcast_to(np.asarray(self.albedo, dtype=float), points.shape)
        if not self.checker:
            return base
        cell = np.floor(points / self.checker).astype(np.int64).sum(axis=-1) % 2
        return base * np.where(cell == 0, 1.0, 0.5)[:, None]

    def shade(self, points, dirs) -> np.ndarray:
        """Headlight Lambertian: ``albedo * max(0, -n . d)``."""
        _, g = self.shape.evaluate(points)
        n = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
        lam = np.maximum(0.0, -np.sum(n * dirs, axis=-1, keepdims=True))
        return self.surface_albedo(points) * lam

    @classmethod
    def from_config(cls, cfg: Config) -> "SceneSpec":
        return cls(parse_shape(cfg["scene.shape"]), cfg["scene.albedo"], cfg["scene.checker"],
                   cfg["scene.background"])


@dataclass
class Dataset:
    cameras: list[Camera]
    images: list[ImageBuffer]
    radius: float = SCENE_RADIUS
    gt_mesh: TriMesh | None = None
    config: Config | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise ValueError("a dataset needs at least 2 views")
        if len(self.cameras) != len(self.images):
            raise ValueError("camera and image counts differ")
        sizes = {(im.width, im.height) for im in self.images}
        if len(sizes) != 1:
            raise ValueError(f"inconsistent image sizes {sorted(sizes)}")


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` near-uniform unit vectors on a golden-angle spiral."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    r = np.sqrt(1.0 - z * z)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def fibonacci_cameras(n_views: int, resolution: int, fov_deg: float = 40.0,
                      distance: float = 3.2) -> list[Camera]:
    K = intrinsics_from_fov(resolution, resolution, fov_deg)
    return [Camera(K, look_at(distance * p), resolution, resolution)
            for p in fibonacci_sphere(n_views)]


def check_bounds(shape: AnalyticSdf, bound: float) -> None:
    """Raise unless the shape is strictly inside the cube ``[-bound, bound]^3``."""
    p = fibonacci_sphere(BOUNDS_CHECK_POINTS)
    pts = p / np.abs(p).max(axis=-1, keepdims=True) * bound  # projected onto the cube
    vals, _ = shape.evaluate(pts)
    if np.any(vals <= 0):
        raise ShapeOutOfBoundsError(f"shape reaches outside the bounds [-{bound}, {bound}]^3")


def sphere_trace(shape: AnalyticSdf, origins, dirs, t_near, t_far):
    """First hit along each ray; returns ``(t, hit)``."""
    t = np.array(t_near, dtype=float)
    active = np.ones(len(t), dtype=bool)
    hit = np.zeros(len(t), dtype=bool)
    for _ in range(TRACE_MAX_STEPS):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        f, _ = shape.evaluate(origins[idx] + t[idx, None] * dirs[idx])
        done = f < TRACE_HIT_EPS
        hit[idx[done]] = True
        t[idx[~done]] += TRACE_SAFETY * f[~done]
        escaped = t[idx] > t_far[idx]
        active[idx[done | escaped]] = False
    # a few Newton steps along the ray to land on f = 0
    idx = np.flatnonzero(hit)
    for _ in range(4):
        f, g = shape.evaluate(origins[idx] + t[idx, None] * dirs[idx])
        slope = np.sum(g * dirs[idx], axis=-1)
        ok = slope < -1e-6
        t[idx[ok]] -= f[ok] / slope[ok]
    return t, hit


def render_analytic(spec: SceneSpec, camera: Camera, radius: float = SCENE_RADIUS):
    """Sphere-traced image with headlight shading; returns ``ImageBuffer`` with depth."""
    o, d, tn, tf, inside = camera_rays(camera, radius)
    n = len(o)
    rgb = np.broadcast_to(np.asarray(spec.background, dtype=float), (n, 3)).copy()
    depth = np.zeros(n)
    idx = np.flatnonzero(inside)
    t, hit = sphere_trace(spec.shape, o[idx], d[idx], tn[idx], tf[idx])
    idx, t = idx[hit], t[hit]
    pts = o[idx] + t[:, None] * d[idx]
    rgb[idx] = spec.shade(pts, d[idx])
    depth[idx] = t
    H, W = camera.height, camera.width
    return ImageBuffer(W, H, rgb.reshape(H, W, 3), depth.reshape(H, W))


def generate_dataset(cfg: Config, radius: float = SCENE_RADIUS, with_mesh: bool = True) -> Dataset:
    """Render ``scene.views`` images of the scene in ``cfg``; deterministic."""
    spec = SceneSpec.from_config(cfg)
    n_views = cfg["scene.views"]
    if n_views < 2:
        raise ValueError("need at least 2 views")
    check_bounds(spec.shape, min(cfg["mesh.bound"], radius))
    cams = fibonacci_cameras(n_views, cfg["scene.resolution"], cfg["scene.fov"],
                             cfg["scene.camera_radius"])
    images = [render_analytic(spec, cam, radius) for cam in cams]
    mesh = None
    if with_mesh:
        mesh = marching_cubes(lambda p: spec.shape.evaluate(p)[0], cfg["scene.gt_resolution"],
                              cfg["mesh.bound"])
    return Dataset(cams, images, radius, mesh, cfg)


def write_dataset(path, ds: Dataset) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    write_cameras(root / "cameras.txt", ds.cameras)
    for k, img in enumerate(ds.images):
        write_png(root / "images" / f"{k:04d}.png", img)
    if ds.gt_mesh is not None:
        write_obj(root / "gt_mesh.obj", ds.gt_mesh)
    if ds.config is not None:
        config_mod.save(root / "spec.cfg", ds.config, SCENE_KEYS)


def load_dataset(path, radius: float = SCENE_RADIUS) -> Dataset:
    root = Path(path)
    cam_file = root / "cameras.txt"
    if not cam_file.is_file():
        raise FileNotFoundError(f"no cameras.txt in dataset directory {root}")
    cams = read_cameras(cam_file)
    files = sorted((root / "images").glob("*.png"))
    if len(files) != len(cams):
        raise ValueError(f"{root}: {len(cams)} cameras but {len(files)} images")
    images = [read_image(f) for f in files]
    mesh = read_obj(root / "gt_mesh.obj") if (root / "gt_mesh.obj").is_file() else None
    cfg = config_mod.load(root / "spec.cfg") if (root / "spec.cfg").is_file() else None
    return Dataset(cams, images, radius, mesh, cfg)


def scene_config(shape: str | AnalyticSdf, **overrides) -> Config:
    """Scene config with the given shape; ``overrides`` use ``_`` for ``.``."""
    cfg = Config()
    cfg.set("scene.shape", shape if isinstance(shape, str) else format_shape(shape))
    for k, v in overrides.items():
        cfg.set(k.replace("_", ".", 1), v)
    return cfg
