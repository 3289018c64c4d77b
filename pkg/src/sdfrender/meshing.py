"""Zero-level-set extraction and surface metrics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from skimage import measure

DEGENERATE_AREA = 1e-12
PSNR_IDENTICAL = float("inf")


class EmptyMeshError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    triangles: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=-1)


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)


def grid_values(field_eval, resolution: int, bound: float, chunk: int = 65536):
    """Evaluate ``field_eval(points) -> values`` on a ``resolution^3`` grid over ``[-bound, bound]^3``."""
    lin = np.linspace(-bound, bound, resolution)
    X, Y, Z = np.meshgrid(lin, lin, lin, indexing="ij")
    pts = np.stack([X, Y, Z], axis=-1).reshape(-1, 3)
    vals = np.concatenate([np.asarray(field_eval(pts[a:a + chunk]), dtype=float)
                           for a in range(0, len(pts), chunk)])
    return vals.reshape(resolution, resolution, resolution)


def marching_cubes(field_eval, grid_resolution: int, bound: float = 1.0,
                   min_component_fraction: float | None = 0.01) -> TriMesh:
    """Triangulate the ``f = 0`` level set of ``field_eval`` inside ``[-bound, bound]^3``.

    ``field_eval(points (N, 3)) -> values (N,)``.  Components holding fewer
    than ``min_component_fraction`` of all vertices are dropped (``None``
    keeps everything).
    """
    if grid_resolution < 8:
        raise ValueError("grid resolution must be >= 8")
    vol = grid_values(field_eval, grid_resolution, bound)
    if not (vol.min() < 0 < vol.max()):
        raise EmptyMeshError("field does not change sign inside the bounds")
    spacing = 2.0 * bound / (grid_resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(spacing,) * 3,
                                                allow_degenerate=False)
    mesh = TriMesh(verts - bound, faces)
    mesh = remove_degenerate(mesh)
    if min_component_fraction:
        mesh = remove_small_components(mesh, min_component_fraction)
    return mesh


def remove_degenerate(mesh: TriMesh) -> TriMesh:
    keep = mesh.areas() > DEGENERATE_AREA
    return compact(TriMesh(mesh.vertices, mesh.triangles[keep]))


def compact(mesh: TriMesh) -> TriMesh:
    used = np.unique(mesh.triangles)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriMesh(mesh.vertices[used], remap[mesh.triangles])


def remove_small_components(mesh: TriMesh, min_fraction: float) -> TriMesh:
    n = len(mesh.vertices)
    if n == 0:
        return mesh
    tri = mesh.triangles
    rows = np.concatenate([tri[:, 0], tri[:, 1], tri[:, 2]])
    cols = np.concatenate([tri[:, 1], tri[:, 2], tri[:, 0]])
    adj = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    counts = np.bincount(labels)
    keep_label = counts >= min_fraction * n
    keep = keep_label[labels[tri[:, 0]]]
    return compact(TriMesh(mesh.vertices, tri[keep]))


def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(v) for v in tok[1:4]])
        elif tok[0] == "f":
            faces.append([int(v.split("/")[0]) - 1 for v in tok[1:4]])
    return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def sample_mesh(mesh: TriMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface."""
    if len(mesh.triangles) == 0:
        raise EmptyMeshError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    area = mesh.areas()
    face = rng.choice(len(area), size=n, p=area / area.sum())
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1.0
    u, v = np.where(flip, 1.0 - u, u), np.where(flip, 1.0 - v, v)
    tri = mesh.vertices[mesh.triangles[face]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return PointCloud(pts)


def _points(cloud) -> np.ndarray:
    p = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(p) == 0:
        raise ValueError("empty point cloud")
    return p


def nearest_sq_dist(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Squared distance from each ``src`` point to its nearest ``dst`` point."""
    _, idx = cKDTree(dst).query(src, k=1)
    diff = src - dst[idx]
    return np.sum(diff * diff, axis=-1)


def chamfer(S1, S2) -> float:
    """Symmetric mean of squared nearest-neighbor distances, halved."""
    a, b = _points(S1), _points(S2)
    return 0.5 * (np.mean(nearest_sq_dist(a, b)) + np.mean(nearest_sq_dist(b, a)))


def chamfer_unsquared(S1, S2) -> float:
    """Same as :func:`chamfer` with plain (unsquared) distances."""
    a, b = _points(S1), _points(S2)
    return 0.5 * (np.mean(np.sqrt(nearest_sq_dist(a, b))) + np.mean(np.sqrt(nearest_sq_dist(b, a))))


def psnr(rendered, reference) -> float:
    a = np.asarray(getattr(rendered, "rgb", rendered), dtype=float)
    b = np.asarray(getattr(reference, "rgb", reference), dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return float(-10.0 * np.log10(mse))
