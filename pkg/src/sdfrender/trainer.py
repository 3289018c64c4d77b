"""Loss, Adam and the training loop.

The loss for a batch of ``M`` rays with ``N`` samples in total is

    L = (1/M) sum_rays mean_rgb |C_hat - C|
        + w_eik (1/N) sum_samples [(|grad f_b| - 1)^2 + (|grad f| - 1)^2]

where the radiance term averages the three channels of each ray's L1 error
and the Eikonal term (``w_eik`` 1 by default) is evaluated at the ray samples.  Without a
displacement network only ``f_b`` is regularized.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape
from .config import Config
from .encoding import anneal_step
from .geometry import camera_rays
from .model import BASE_ONLY_ALPHA, Model, TrainState, init_state, save_checkpoint
from .renderer import volume_render
from .sampling import SamplerConfig, hierarchical_t

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DIVERGENCE_PATIENCE = 10
LOG_SCHEMA = "sdfrender-trainlog v1"
LOG_COLUMNS = ["iteration", "loss", "loss_rad", "loss_eik", "s", "alpha_d", "c_mean", "c_min",
               "c_max", "invalid_rays", "skipped"]


class AllRaysInvalidError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class RayBatch:
    origins: np.ndarray  # (B, 3)
    directions: np.ndarray  # (B, 3)
    t_near: np.ndarray
    t_far: np.ndarray
    target: np.ndarray  # (B, 3)

    def __len__(self):
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.t_near[idx],
                        self.t_far[idx], self.target[idx])


def ray_pool(dataset) -> RayBatch:
    """Every pixel ray of the dataset that meets the scene bounds."""
    parts = []
    for cam, img in zip(dataset.cameras, dataset.images):
        o, d, tn, tf, hit = camera_rays(cam, dataset.radius)
        rgb = img.rgb.reshape(-1, 3)
        parts.append((o[hit], d[hit], tn[hit], tf[hit], rgb[hit]))
    return RayBatch(*(np.concatenate(p) for p in zip(*parts)))


def sampler_config(cfg: Config) -> SamplerConfig:
    return SamplerConfig(cfg["sample.uniform"], cfg["sample.importance"],
                         cfg["sample.stratified"], cfg["sample.seed"])


@dataclass
class LossResult:
    total: float
    radiance: float
    eikonal: float
    grads: dict | None
    invalid: int
    c: np.ndarray


def sample_rays(model: Model, batch: RayBatch, scfg: SamplerConfig, rng):
    """Hierarchical sample positions ``t (B, K)`` and per-ray gains ``c``."""
    scene = model.scene()
    t, c, _ = hierarchical_t(batch.origins, batch.directions, batch.t_near, batch.t_far,
                             scene.evaluate, model.s, scfg, rng, model.adaptive)
    return t, c


def _forward_loss(model: Model, batch: RayBatch, t, c, background, eikonal_weight):
    B, K = t.shape
    pts = batch.origins[:, None, :] + t[..., None] * batch.directions[:, None, :]
    dirs = np.broadcast_to(batch.directions[:, None, :], pts.shape)
    s = ad.exp(model.log_s)
    out, rgb = model.scene(s).forward(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    d = dirs.reshape(-1, 3).astype(model.sdf.dtype)
    f = ad.reshape(out.sdf, (B, K))
    gd = ad.reshape(ad.sum(out.grad * d, axis=-1), (B, K))
    color, _, _, _ = volume_render(t, f, gd, ad.reshape(rgb, (B, K, 3)),
                                   s * c[:, None].astype(model.sdf.dtype), background)
    rad = ad.mean(ad.abs(color - batch.target.astype(model.sdf.dtype)))
    eik = ad.mean((ad.norm(out.grad) - 1.0) ** 2)
    if model.sdf.displacement is not None:
        eik = eik + ad.mean((ad.norm(out.base_grad) - 1.0) ** 2)
    total = rad + eikonal_weight * eik
    finite = (np.isfinite(ad.value_of(out.sdf)).reshape(B, K).all(-1)
              & np.isfinite(ad.value_of(out.grad)).reshape(B, K, 3).all((-1, -2))
              & np.isfinite(ad.value_of(rgb)).reshape(B, K, 3).all((-1, -2)))
    return total, rad, eik, finite


def loss_at(model: Model, batch: RayBatch, t, c, background=(1.0, 1.0, 1.0),
            eikonal_weight: float = 1.0, with_grad: bool = True) -> LossResult:
    """Loss (and parameter gradients) at fixed sample positions.

    Rays whose field output is not finite are dropped and counted; if none
    remain :class:`AllRaysInvalidError` is raised.
    """
    if len(batch) == 0:
        raise ValueError("empty ray batch")
    params = model.params()
    c = np.asarray(c, dtype=float)
    with GradientTape() as tape:
        total, rad, eik, finite = _forward_loss(model, batch, t, c, background, eikonal_weight)
    invalid = int(np.sum(~finite))
    if invalid:
        if invalid == len(batch):
            raise AllRaysInvalidError("every ray in the batch produced non-finite output")
        keep = np.flatnonzero(finite)
        batch, t, c = batch.subset(keep), t[keep], c[keep]
        with GradientTape() as tape:
            total, rad, eik, _ = _forward_loss(model, batch, t, c, background, eikonal_weight)
    grads = None
    if with_grad:
        names = list(params)
        grads = dict(zip(names, tape.gradient(total, [params[k] for k in names])))
    return LossResult(float(total.value), float(rad.value), float(eik.value), grads, invalid, c)


def loss(batch: RayBatch, state: TrainState) -> LossResult:
    """Sample the batch with the state's rng, then evaluate loss and gradients."""
    cfg = state.config
    t, c = sample_rays(state.model, batch, sampler_config(cfg), state.rng)
    return loss_at(state.model, batch, t, c, cfg["render.background"],
                   cfg["train.eikonal_weight"])


def adam_step(state: TrainState, grads: dict, lr: float) -> bool:
    """One Adam update in place; returns False (and skips) on non-finite gradients."""
    params = state.model.params()
    for k, g in grads.items():
        if np.shape(g) != params[k].shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter {k} {params[k].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("iteration %d: non-finite gradient, step skipped", state.iteration)
        return False
    state.adam_steps += 1
    n = state.adam_steps
    bc1 = 1.0 - ADAM_BETA1 ** n
    bc2 = 1.0 - ADAM_BETA2 ** n
    for k, g in grads.items():
        p = params[k]
        dt = p.value.dtype
        m = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g
        state.m[k], state.v[k] = m.astype(dt), v.astype(dt)
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        p.value = (p.value - step).astype(dt)
    return True


def anneal(state: TrainState) -> None:
    """Advance the coarse-to-fine window by one iteration."""
    if state.model.c2f:
        state.alpha_d = anneal_step(state.alpha_d, state.config.n_max)
        state.model.set_alpha_d(state.alpha_d)


def draw_batch(pool: RayBatch, n: int, rng) -> RayBatch:
    return pool.subset(rng.choice(len(pool), size=min(n, len(pool)), replace=False))


@dataclass
class TrainResult:
    state: TrainState
    log_path: Path | None
    checkpoint: Path | None
    seconds: float


def train(dataset, config: Config, out_dir=None, state: TrainState | None = None,
          progress=None) -> TrainResult:
    """Run ``train.iterations`` steps (continuing from ``state`` if given).

    With ``out_dir`` a CSV log, periodic checkpoints and ``final.npz`` are
    written there.  ``progress(state, row)`` is called after every step.
    """
    t0 = time.perf_counter()
    state = state if state is not None else init_state(config)
    cfg = state.config
    pool = ray_pool(dataset)
    scfg = sampler_config(cfg)
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        fh.write(f"# {LOG_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
    bad_streak = 0
    last_ckpt = None
    try:
        while state.iteration < cfg["train.iterations"]:
            batch = draw_batch(pool, cfg["train.batch_rays"], state.rng)
            t, c = sample_rays(state.model, batch, scfg, state.rng)
            res = loss_at(state.model, batch, t, c, cfg["render.background"],
                          cfg["train.eikonal_weight"])
            finite = np.isfinite(res.total)
            bad_streak = 0 if finite else bad_streak + 1
            if bad_streak >= DIVERGENCE_PATIENCE:
                dump = None
                if out is not None:
                    dump = out / "diverged.npz"
                    save_checkpoint(dump, state)
                raise DivergenceError(
                    f"loss non-finite for {bad_streak} consecutive steps at iteration "
                    f"{state.iteration} (s={state.model.s:.4g}, alpha_d={state.alpha_d:.4g}); "
                    f"state dumped to {dump}")
            stepped = finite and adam_step(state, res.grads, cfg["train.lr"])
            state.iteration += 1
            anneal(state)
            state.history.append((state.iteration, res.total, res.radiance, res.eikonal))
            row = [state.iteration, res.total, res.radiance, res.eikonal, state.model.s,
                   state.alpha_d, float(np.mean(res.c)), float(np.min(res.c)),
                   float(np.max(res.c)), res.invalid, int(not stepped)]
            if writer is not None:
                writer.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])
                every = cfg["train.checkpoint_every"]
                if every and state.iteration % every == 0:
                    last_ckpt = out / f"ckpt_{state.iteration:06d}.npz"
                    save_checkpoint(last_ckpt, state)
            if progress is not None:
                progress(state, dict(zip(LOG_COLUMNS, row)))
    finally:
        if fh is not None:
            fh.close()
    if out is not None:
        last_ckpt = out / "final.npz"
        save_checkpoint(last_ckpt, state)
    return TrainResult(state, out / "train_log.csv" if out else None, last_ckpt,
                       time.perf_counter() - t0)


def base_only(cfg: Config) -> Config:
    """Ablation config: no displacement net, frozen encoding window, no gain on s."""
    abl = Config(dict(cfg))
    abl.set("model.idf", False)
    abl.set("model.c2f", False)
    abl.set("model.adaptive", False)
    return abl


__all__ = ["ADAM_BETA1", "ADAM_BETA2", "ADAM_EPS", "BASE_ONLY_ALPHA", "AllRaysInvalidError",
           "DivergenceError", "LossResult", "RayBatch", "TrainResult", "adam_step", "anneal",
           "base_only", "draw_batch", "loss", "loss_at", "ray_pool", "sample_rays", "train"]
