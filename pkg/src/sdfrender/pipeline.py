"""End-to-end helpers shared by the CLI and the reference benchmark."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .config import Config
from .dataset import Dataset
from .meshing import TriMesh, chamfer, chamfer_unsquared, marching_cubes, psnr, sample_mesh
from .model import Model
from .renderer import ImageBuffer, render_image
from .trainer import sampler_config
from .transparency import ScaleParam

METRIC_COLUMNS = ["scene", "chamfer_sq", "chamfer_unsq", "psnr"]
CHAMFER_POINTS = 50_000


def extract_mesh(model: Model, cfg: Config, resolution: int | None = None) -> TriMesh:
    """Zero level set of the model's composite SDF."""
    s = model.s
    res = resolution or cfg["mesh.resolution"]
    return marching_cubes(lambda p: model.sdf.evaluate(p, s)[0], res, cfg["mesh.bound"],
                          cfg["mesh.min_component"] or None)


def mesh_chamfer(mesh: TriMesh, gt: TriMesh, n_points: int = CHAMFER_POINTS, seed: int = 0):
    """``(squared, unsquared)`` Chamfer between surface samples of two meshes."""
    a = sample_mesh(mesh, n_points, seed)
    b = sample_mesh(gt, n_points, seed + 1)
    return chamfer(a, b), chamfer_unsquared(a, b)


def render_views(model: Model, dataset: Dataset, cfg: Config, views=None) -> list[ImageBuffer]:
    scfg = sampler_config(cfg)
    idx = range(len(dataset.cameras)) if views is None else views
    scene = model.scene()
    return [render_image(dataset.cameras[k], scene, ScaleParam(model.s), scfg,
                         cfg["render.background"], seed=scfg.rng_seed + k,
                         adaptive=model.adaptive) for k in idx]


def mean_psnr(rendered: list[ImageBuffer], reference: list[ImageBuffer]) -> float:
    return float(np.mean([psnr(a, b) for a, b in zip(rendered, reference)]))


def write_metrics(path, rows: list[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.9g}" if isinstance(r.get(k), float) else r.get(k, ""))
                        for k in METRIC_COLUMNS})


def run_benchmark(cfg: Config, ablation: bool = False, progress=None, out_dir=None) -> dict:
    """Generate the scene in ``cfg``, train, extract a mesh and score it.

    With ``ablation`` the base-only variant of ``cfg`` is trained on the same
    data.  ``out_dir`` keeps the training log and checkpoints.  Returns a
    dict with the Chamfer pair, the loss history ``(n, 4)`` and timings.
    """
    from .dataset import generate_dataset
    from .trainer import base_only, train

    ds = generate_dataset(cfg)
    run_cfg = base_only(cfg) if ablation else cfg
    res = train(ds, run_cfg, out_dir, progress=progress)
    mesh = extract_mesh(res.state.model, run_cfg)
    sq, unsq = mesh_chamfer(mesh, ds.gt_mesh)
    history = np.array(res.state.history, dtype=float).reshape(-1, 4)
    tail = history[-100:, 2] if len(history) else np.array([np.nan])
    return {"variant": "base-only" if ablation else "full", "chamfer_sq": float(sq),
            "chamfer_unsq": float(unsq), "loss_rad_last100": float(tail.mean()),
            "s": float(res.state.model.s), "train_seconds": res.seconds, "history": history,
            "mesh": mesh}
