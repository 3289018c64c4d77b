"""Command-line entry point: ``sdfrender <command> ...``.

Commands::

    generate SPEC OUT           render a synthetic dataset from a scene spec
    train DATASET OUT           optimize a model; writes checkpoints and a CSV log
    render CHECKPOINT OUT       render images (and depth) for dataset cameras
    extract CHECKPOINT OUT.obj  marching-cubes mesh of the learned surface
    eval                        Chamfer / PSNR metrics as a CSV row
    probe                       per-sample t, f, sigma, T, alpha, weight along one ray
    benchmark CONFIG            generate, train, extract and score in one go

Exit codes: 0 success, 2 bad usage, 3 missing file, 4 malformed config,
5 invalid input or data, 6 training diverged.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .config import Config, ConfigError
from .dataset import SceneSpec, generate_dataset, load_dataset, write_dataset
from .geometry import make_ray, read_cameras
from .meshing import EmptyMeshError, read_obj, write_obj
from .model import CheckpointError, load_checkpoint
from .pipeline import extract_mesh, mean_psnr, mesh_chamfer, run_benchmark, write_metrics
from .renderer import (AnalyticScene, read_image, render_image, write_depth_png, write_png)
from .sampling import hierarchical_pass
from .trainer import DivergenceError, sampler_config, train
from .transparency import ScaleParam, composite_alpha, density

EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_INPUT, EXIT_DIVERGED = 2, 3, 4, 5, 6
PROBE_COLUMNS = ["t", "f", "sigma", "T", "alpha", "weight"]


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_config(path, overrides) -> Config:
    if path is None:
        return Config().override(overrides)
    return config_mod.load(_require(path, "config file"), overrides)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load_config(args.spec, args.set)
    if args.views is not None:
        cfg.set("scene.views", args.views)
    if args.res is not None:
        cfg.set("scene.resolution", args.res)
    if args.seed is not None:
        cfg.set("scene.seed", args.seed)
    ds = generate_dataset(cfg, with_mesh=not args.no_mesh)
    write_dataset(args.out, ds)
    print(f"wrote {len(ds.images)} views to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(_require(args.dataset, "dataset directory"))
    cfg = _load_config(args.config, args.set)
    if args.iterations is not None:
        cfg.set("train.iterations", args.iterations)

    def progress(state, row):
        if args.verbose and row["iteration"] % args.print_every == 0:
            print(f"it {row['iteration']:6d} loss {row['loss']:.5f} rad {row['loss_rad']:.5f} "
                  f"eik {row['loss_eik']:.5f} s {row['s']:.2f} alpha_d {row['alpha_d']:.3f}",
                  flush=True)

    res = train(ds, cfg, args.out, progress=progress)
    print(f"trained {res.state.iteration} iterations in {res.seconds:.1f}s; "
          f"checkpoint {res.checkpoint}")
    return 0


def cmd_render(args) -> int:
    state = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    cams = read_cameras(_require(args.cameras, "camera file"))
    views = args.views if args.views else range(len(cams))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = state.config
    scene = state.model.scene()
    for k in views:
        if not 0 <= k < len(cams):
            raise ValueError(f"view {k} out of range (0..{len(cams) - 1})")
        img = render_image(cams[k], scene, ScaleParam(state.model.s), sampler_config(cfg),
                           cfg["render.background"], seed=cfg["sample.seed"] + k,
                           adaptive=state.model.adaptive)
        write_png(out / f"{k:04d}.png", img)
        write_depth_png(out / f"{k:04d}_depth.png", img)
    print(f"rendered {len(views)} view(s) to {out}")
    return 0


def cmd_extract(args) -> int:
    state = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    cfg = state.config
    if args.bound is not None:
        cfg.set("mesh.bound", args.bound)
    mesh = extract_mesh(state.model, cfg, args.resolution)
    write_obj(args.out, mesh)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles to {args.out}")
    return 0


def cmd_eval(args) -> int:
    row = {"scene": args.scene, "chamfer_sq": "", "chamfer_unsq": "", "psnr": ""}
    if args.mesh or args.gt:
        if not (args.mesh and args.gt):
            raise ValueError("--mesh and --gt must be given together")
        mesh = read_obj(_require(args.mesh, "mesh"))
        gt = read_obj(_require(args.gt, "ground-truth mesh"))
        row["chamfer_sq"], row["chamfer_unsq"] = mesh_chamfer(mesh, gt, args.points, args.seed)
    if args.images or args.reference:
        if not (args.images and args.reference):
            raise ValueError("--images and --reference must be given together")
        ours = sorted(p for p in _require(args.images, "image directory").glob("*.png")
                      if not p.stem.endswith("_depth"))
        ref = sorted(_require(args.reference, "reference directory").glob("*.png"))
        ref = [p for p in ref if p.stem in {q.stem for q in ours}]
        if not ours or len(ours) != len(ref):
            raise ValueError("image and reference sets do not match")
        row["psnr"] = mean_psnr([read_image(p) for p in ours], [read_image(p) for p in ref])
    if args.out:
        write_metrics(args.out, [row])
    w = csv.DictWriter(sys.stdout, fieldnames=list(row))
    w.writeheader()
    w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
    return 0


def cmd_probe(args) -> int:
    if (args.checkpoint is None) == (args.scene is None):
        raise ValueError("give exactly one of --checkpoint or --scene")
    if args.checkpoint is not None:
        state = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        field, s, cfg = state.model.scene(), state.model.s, state.config
        adaptive = state.model.adaptive
    else:
        cfg = _load_config(args.scene, args.set)
        spec = SceneSpec.from_config(cfg)
        field, s, adaptive = AnalyticScene(spec.shape, spec.albedo), args.s, not args.no_adaptive
    if args.s is not None:
        s = args.s
    ray = make_ray(np.array(args.origin), np.array(args.direction))
    if ray.empty:
        raise ValueError("probe ray misses the scene bounds")
    scfg = sampler_config(cfg)
    rng = np.random.default_rng(scfg.rng_seed)
    samples, c = hierarchical_pass(ray, field, ScaleParam(s), scfg, rng, adaptive)
    dt = np.diff(samples.t)
    dt = np.append(dt, dt.mean())
    s_eff = s * c
    sig = density(s_eff, samples.f, samples.grad_dot_d)
    q = composite_alpha(sig, dt)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(PROBE_COLUMNS)
        for row in zip(samples.t, samples.f, sig, q.T, q.alpha, q.weights):
            w.writerow([f"{float(v):.9g}" for v in row])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

BENCHMARK_COLUMNS = ["variant", "chamfer_sq", "chamfer_unsq", "loss_rad_last100", "s",
                     "train_seconds"]


def cmd_benchmark(args) -> int:
    cfg = _load_config(args.config, args.set)
    variants = [False, True] if args.ablation else [False]
    rows = []
    for ablation in variants:
        def progress(state, row):
            if args.verbose and row["iteration"] % args.print_every == 0:
                print(f"it {row['iteration']:6d} loss {row['loss']:.5f}", flush=True)

        log_dir = None
        if args.log_dir:
            log_dir = Path(args.log_dir) / ("base_only" if ablation else "full")
        rows.append(run_benchmark(cfg, ablation, progress, log_dir))
        r = rows[-1]
        print(f"{r['variant']}: chamfer_sq {r['chamfer_sq']:.6g} chamfer_unsq "
              f"{r['chamfer_unsq']:.6g} ({r['train_seconds']:.0f}s)", flush=True)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=BENCHMARK_COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({k: f"{r[k]:.9g}" if isinstance(r[k], float) else r[k]
                            for k in BENCHMARK_COLUMNS})
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdfrender",
                                description="Neural SDF reconstruction by volume rendering.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="print progress")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def overrides(sp):
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")

    g = sub.add_parser("generate", help="render a synthetic dataset from a scene spec")
    g.add_argument("spec", help="scene spec file (key = value)")
    g.add_argument("out", help="output dataset directory")
    g.add_argument("--views", type=int, help="number of camera views")
    g.add_argument("--res", type=int, help="image width and height in pixels")
    g.add_argument("--seed", type=int, help="generation seed")
    g.add_argument("--no-mesh", action="store_true", help="skip the ground-truth mesh")
    overrides(g)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("dataset", help="dataset directory")
    t.add_argument("out", help="output directory for checkpoints and train_log.csv")
    t.add_argument("--config", help="training config file (key = value)")
    t.add_argument("--iterations", type=int, help="shortcut for --set train.iterations=N")
    t.add_argument("--print-every", type=int, default=100, help="progress interval with -v")
    overrides(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("checkpoint", help="checkpoint .npz")
    r.add_argument("out", help="output image directory")
    r.add_argument("--cameras", required=True, help="cameras.txt file")
    r.add_argument("--views", type=int, nargs="*", help="view indices (default: all)")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("extract", help="extract a mesh from a checkpoint")
    e.add_argument("checkpoint", help="checkpoint .npz")
    e.add_argument("out", help="output .obj path")
    e.add_argument("--resolution", type=int, help="marching-cubes grid resolution")
    e.add_argument("--bound", type=float, help="half-size of the extraction cube")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="compare a mesh and/or images against ground truth")
    v.add_argument("--mesh", help="reconstructed mesh .obj")
    v.add_argument("--gt", help="ground-truth mesh .obj")
    v.add_argument("--images", help="directory of rendered PNGs")
    v.add_argument("--reference", help="directory of reference PNGs with matching names")
    v.add_argument("--scene", default="scene", help="scene label for the CSV row")
    v.add_argument("--points", type=int, default=50_000, help="surface samples per mesh")
    v.add_argument("--seed", type=int, default=0, help="surface sampling seed")
    v.add_argument("--out", help="also write the CSV row to this file")
    v.set_defaults(func=cmd_eval)

    q = sub.add_parser("probe", help="dump per-sample quantities along one ray")
    q.add_argument("--checkpoint", help="checkpoint .npz")
    q.add_argument("--scene", help="analytic scene spec file")
    q.add_argument("--origin", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    q.add_argument("--direction", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    q.add_argument("--s", type=float, default=None,
                   help="scale s (default: checkpoint value, or 100 for --scene)")
    q.add_argument("--no-adaptive", action="store_true", help="disable the per-ray gain")
    q.add_argument("--out", help="CSV path (default: stdout)")
    overrides(q)
    q.set_defaults(func=cmd_probe)

    b = sub.add_parser("benchmark", help="end-to-end reconstruction benchmark")
    b.add_argument("config", help="scene and training config file")
    b.add_argument("--ablation", action="store_true", help="also train the base-only variant")
    b.add_argument("--print-every", type=int, default=250, help="progress interval with -v")
    b.add_argument("--out", help="CSV file for the result rows")
    b.add_argument("--log-dir", help="keep training logs and checkpoints under this directory")
    overrides(b)
    b.set_defaults(func=cmd_benchmark)
    return p


PROBE_DEFAULT_S = 100.0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "probe" and args.scene is not None and args.s is None:
        args.s = PROBE_DEFAULT_S
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"sdfrender: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"sdfrender: malformed config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"sdfrender: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, EmptyMeshError, ValueError) as exc:
        print(f"sdfrender: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
