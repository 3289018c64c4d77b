"""Rays, pinhole cameras and analytic signed distance fields.

All SDFs are positive outside the surface.  Analytic fields return exact
gradients and act as the oracle layer for the neural fields.

Shapes are small immutable trees::

    Sphere(center=(0, 0, 0), radius=1.0)
    Union((Sphere(...), Box(half_extents=(0.2, 0.2, 0.2))))
    Offset(BumpySphere(0.8, 0.04, 6.0), 0.01)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SCENE_RADIUS = 1.5
FALLBACK_GRADIENT = np.array([0.0, 0.0, 1.0])


def _vec(v) -> np.ndarray:
    return np.asarray(v, dtype=float)


# ---------------------------------------------------------------------------
# Rays
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    empty: bool = False

    def __post_init__(self):
        object.__setattr__(self, "origin", _vec(self.origin))
        object.__setattr__(self, "direction", _vec(self.direction))
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.empty and not (0.0 <= self.t_near < self.t_far):
            raise ValueError(f"invalid ray interval [{self.t_near}, {self.t_far}]")


def ray_at(ray: Ray, t):
    """Point(s) ``origin + t * direction``; ``t`` may be an array."""
    t = np.asarray(t, dtype=float)
    return ray.origin + t[..., None] * ray.direction


def sphere_interval(origins, directions, radius: float = SCENE_RADIUS):
    """Ray/sphere (centered at origin) intersection parameters.

    Returns ``(t_near, t_far, hit)``; ``t_near`` is clipped at 0 for origins
    inside the sphere and ``hit`` is False where the ray misses or the sphere
    lies entirely behind the origin.
    """
    o = np.atleast_2d(origins)
    d = np.atleast_2d(directions)
    b = np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    root = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - root
    t1 = -b + root
    hit = (disc > 0) & (t1 > 0)
    return np.maximum(t0, 0.0), t1, hit


def make_ray(origin, direction, radius: float = SCENE_RADIUS) -> Ray:
    d = _vec(direction)
    d = d / np.linalg.norm(d)
    tn, tf, hit = sphere_interval(origin, d, radius)
    if not hit[0] or tf[0] <= tn[0]:
        return Ray(origin, d, 0.0, 0.0, empty=True)
    return Ray(origin, d, float(tn[0]), float(tf[0]))


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Camera:
    """Pinhole camera in OpenCV convention (x right, y down, z forward)."""

    intrinsics: np.ndarray
    camera_to_world: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = _vec(self.intrinsics).reshape(3, 3)
        M = _vec(self.camera_to_world).reshape(4, 4)
        R = M[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("camera rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "camera_to_world", M)

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    def pixel_directions(self, i, j) -> np.ndarray:
        """Unit world-space directions through pixel centers ``(i + 0.5, j + 0.5)``."""
        i = np.asarray(i, dtype=float)
        j = np.asarray(j, dtype=float)
        K = self.intrinsics
        x = (i + 0.5 - K[0, 2]) / K[0, 0]
        y = (j + 0.5 - K[1, 2]) / K[1, 1]
        d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
        d = d_cam @ self.camera_to_world[:3, :3].T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points) -> np.ndarray:
        """World points to continuous pixel coordinates (u, v)."""
        M = self.camera_to_world
        p = (np.atleast_2d(points) - M[:3, 3]) @ M[:3, :3]
        uv = p @ self.intrinsics.T
        return uv[:, :2] / uv[:, 2:3]

    def scaled(self, factor: float) -> "Camera":
        K = self.intrinsics.copy()
        K[:2] *= factor
        return Camera(K, self.camera_to_world,
                      int(round(self.width * factor)), int(round(self.height * factor)))


def generate_rays(camera: Camera, pixel: tuple[int, int], radius: float = SCENE_RADIUS) -> Ray:
    i, j = pixel
    if not (0 <= i < camera.width and 0 <= j < camera.height):
        raise IndexError(f"pixel {pixel} outside {camera.width}x{camera.height}")
    # pixel directions are already unit length; no renormalization keeps this
    # bit-identical to camera_rays
    d = camera.pixel_directions(i, j)
    tn, tf, hit = sphere_interval(camera.center, d, radius)
    if not hit[0] or tf[0] <= tn[0]:
        return Ray(camera.center, d, 0.0, 0.0, empty=True)
    return Ray(camera.center, d, float(tn[0]), float(tf[0]))


def camera_rays(camera: Camera, radius: float = SCENE_RADIUS):
    """All pixel rays of a camera in row-major order.

    Returns ``(origins, directions, t_near, t_far, hit)`` arrays of length
    ``width * height``.
    """
    jj, ii = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    d = camera.pixel_directions(ii.ravel(), jj.ravel())
    o = np.broadcast_to(camera.center, d.shape).copy()
    tn, tf, hit = sphere_interval(o, d, radius)
    return o, d, tn, tf, hit & (tf > tn)


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    eye, target, up = _vec(eye), _vec(target), _vec(up)
    forward = target - eye
    forward /= np.linalg.norm(forward)
    if abs(np.dot(forward, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    M = np.eye(4)
    M[:3, 0], M[:3, 1], M[:3, 2], M[:3, 3] = right, down, forward, eye
    return M


def intrinsics_from_fov(width: int, height: int, fov_deg: float) -> np.ndarray:
    focal = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
    return np.array([[focal, 0.0, 0.5 * width], [0.0, focal, 0.5 * height], [0.0, 0.0, 1.0]])


def write_cameras(path, cameras: Sequence[Camera]) -> None:
    lines = ["# fx 0 cx 0 fy cy 0 0 1 | camera_to_world (4x4 row-major) | width height"]
    for cam in cameras:
        vals = [*cam.intrinsics.ravel(), *cam.camera_to_world.ravel()]
        lines.append(" ".join(repr(float(v)) for v in vals) + f" {cam.width} {cam.height}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path) -> list[Camera]:
    cams = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 27:
            raise ValueError(f"{path}:{n}: expected 27 values, got {len(tok)}")
        vals = [float(t) for t in tok[:25]]
        cams.append(Camera(np.reshape(vals[:9], (3, 3)), np.reshape(vals[9:], (4, 4)),
                           int(tok[25]), int(tok[26])))
    return cams


# ---------------------------------------------------------------------------
# Analytic SDFs
# ---------------------------------------------------------------------------

class AnalyticSdf:
    """Base for analytic shapes; ``evaluate`` works on ``(N, 3)`` batches."""

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def __call__(self, x):
        return self.evaluate(np.atleast_2d(np.asarray(x, dtype=float)))


@dataclass(frozen=True)
class Sphere(AnalyticSdf):
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0

    def evaluate(self, x):
        v = x - _vec(self.center)
        r = np.linalg.norm(v, axis=-1)
        safe = r > 0
        grad = np.where(safe[:, None], v / np.where(safe, r, 1.0)[:, None], FALLBACK_GRADIENT)
        return r - self.radius, grad


@dataclass(frozen=True)
class Plane(AnalyticSdf):
    """Half-space ``normal . x <= offset`` (the SDF is ``normal . x - offset``)."""

    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0

    def evaluate(self, x):
        n = _vec(self.normal)
        n = n / np.linalg.norm(n)
        return x @ n - self.offset, np.broadcast_to(n, x.shape).copy()


@dataclass(frozen=True)
class Box(AnalyticSdf):
    half_extents: tuple = (0.5, 0.5, 0.5)

    def evaluate(self, x):
        b = _vec(self.half_extents)
        q = np.abs(x) - b
        outside = np.maximum(q, 0.0)
        out_len = np.linalg.norm(outside, axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        value = out_len + inside
        s = np.where(x >= 0, 1.0, -1.0)
        # outside: direction to the nearest box point; inside: the closest face
        g_out = s * outside / np.where(out_len > 0, out_len, 1.0)[:, None]
        face = np.argmax(q, axis=-1)
        g_in = np.zeros_like(x)
        g_in[np.arange(len(x)), face] = s[np.arange(len(x)), face]
        grad = np.where((out_len > 0)[:, None], g_out, g_in)
        return value, grad


@dataclass(frozen=True)
class BumpySphere(AnalyticSdf):
    """``|x| - r - a sin(w x1) sin(w x2) sin(w x3)``: smooth, not an exact SDF."""

    radius: float = 0.8
    amplitude: float = 0.04
    frequency: float = 6.0

    def evaluate(self, x):
        r = np.linalg.norm(x, axis=-1)
        safe = r > 0
        radial = np.where(safe[:, None], x / np.where(safe, r, 1.0)[:, None], FALLBACK_GRADIENT)
        w, a = self.frequency, self.amplitude
        s = np.sin(w * x)
        c = np.cos(w * x)
        bump = s[:, 0] * s[:, 1] * s[:, 2]
        dbump = w * np.stack([c[:, 0] * s[:, 1] * s[:, 2],
                              s[:, 0] * c[:, 1] * s[:, 2],
                              s[:, 0] * s[:, 1] * c[:, 2]], axis=-1)
        return r - self.radius - a * bump, radial - a * dbump


@dataclass(frozen=True)
class Union(AnalyticSdf):
    children: tuple = field(default_factory=tuple)

    def evaluate(self, x):
        vals, grads = zip(*(c.evaluate(x) for c in self.children))
        vals = np.stack(vals)
        k = np.argmin(vals, axis=0)
        idx = np.arange(len(x))
        return vals[k, idx], np.stack(grads)[k, idx]


@dataclass(frozen=True)
class Offset(AnalyticSdf):
    child: AnalyticSdf = None
    distance: float = 0.0

    def evaluate(self, x):
        v, g = self.child.evaluate(x)
        return v - self.distance, g


def eval_sdf(field: AnalyticSdf, x) -> tuple[float, np.ndarray, bool]:
    """Single-point evaluation: ``(value, gradient, flagged)``.

    ``flagged`` is True when ``x`` sits on a gradient singularity (e.g. the
    sphere center) and the gradient is the fixed fallback unit vector.
    """
    x = np.asarray(x, dtype=float).reshape(1, 3)
    if not np.all(np.isfinite(x)):
        raise ValueError("x must be finite")
    v, g = field.evaluate(x)
    flagged = _at_singularity(field, x[0])
    return float(v[0]), g[0], flagged


def _at_singularity(field, x) -> bool:
    if isinstance(field, (Sphere, BumpySphere)):
        c = _vec(getattr(field, "center", (0.0, 0.0, 0.0)))
        return bool(np.all(x == c))
    if isinstance(field, Offset):
        return _at_singularity(field.child, x)
    if isinstance(field, Union):
        v = [c.evaluate(x[None])[0][0] for c in field.children]
        return _at_singularity(field.children[int(np.argmin(v))], x)
    return False


def ray_sphere_hit(origin, direction, center, radius) -> float | None:
    """First positive intersection of a ray with a sphere, or None."""
    o = _vec(origin) - _vec(center)
    d = _vec(direction)
    b = float(o @ d)
    c = float(o @ o) - radius * radius
    disc = b * b - c
    if disc < 0:
        return None
    root = np.sqrt(disc)
    for t in (-b - root, -b + root):
        if t > 0:
            return float(t)
    return None


# ---------------------------------------------------------------------------
# Shape s-expressions: (sphere cx cy cz r) (plane nx ny nz d) (box hx hy hz)
# (bumpy-sphere r a w) (union A B ...) (offset A d)
# ---------------------------------------------------------------------------

def _tokenize(text: str) -> list[str]:
    return text.replace("(", " ( ").replace(")", " ) ").split()


def parse_shape(text: str) -> AnalyticSdf:
    tokens = _tokenize(text)
    if not tokens:
        raise ValueError("empty shape description")
    shape, pos = _parse(tokens, 0)
    if pos != len(tokens):
        raise ValueError(f"trailing tokens in shape: {' '.join(tokens[pos:])}")
    return shape


def _parse(tokens, pos):
    if tokens[pos] != "(":
        raise ValueError(f"expected '(' at token {pos}, got {tokens[pos]!r}")
    if pos + 1 >= len(tokens):
        raise ValueError("unterminated shape")
    head = tokens[pos + 1]
    pos += 2
    args = []
    while pos < len(tokens) and tokens[pos] != ")":
        if tokens[pos] == "(":
            child, pos = _parse(tokens, pos)
            args.append(child)
        else:
            args.append(float(tokens[pos]))
            pos += 1
    if pos >= len(tokens):
        raise ValueError("unterminated shape")
    pos += 1

    def nums(n):
        if len(args) != n or not all(isinstance(a, float) for a in args):
            raise ValueError(f"({head} ...) expects {n} numbers")
        return args

    if head == "sphere":
        a = nums(4)
        return Sphere(tuple(a[:3]), a[3]), pos
    if head == "plane":
        a = nums(4)
        return Plane(tuple(a[:3]), a[3]), pos
    if head == "box":
        return Box(tuple(nums(3))), pos
    if head == "bumpy-sphere":
        a = nums(3)
        return BumpySphere(*a), pos
    if head == "union":
        if not args or not all(isinstance(a, AnalyticSdf) for a in args):
            raise ValueError("(union ...) expects shapes")
        return Union(tuple(args)), pos
    if head == "offset":
        if len(args) != 2 or not isinstance(args[0], AnalyticSdf):
            raise ValueError("(offset SHAPE d) expects a shape and a number")
        return Offset(args[0], float(args[1])), pos
    raise ValueError(f"unknown shape {head!r}")


def format_shape(shape: AnalyticSdf) -> str:
    def f(v):
        return repr(float(v))

    if isinstance(shape, Sphere):
        return f"(sphere {' '.join(map(f, shape.center))} {f(shape.radius)})"
    if isinstance(shape, Plane):
        return f"(plane {' '.join(map(f, shape.normal))} {f(shape.offset)})"
    if isinstance(shape, Box):
        return f"(box {' '.join(map(f, shape.half_extents))})"
    if isinstance(shape, BumpySphere):
        return f"(bumpy-sphere {f(shape.radius)} {f(shape.amplitude)} {f(shape.frequency)})"
    if isinstance(shape, Union):
        return "(union " + " ".join(format_shape(c) for c in shape.children) + ")"
    if isinstance(shape, Offset):
        return f"(offset {format_shape(shape.child)} {f(shape.distance)})"
    raise TypeError(type(shape))
