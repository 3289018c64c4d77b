"""Trainable model container and checkpoint files.

Checkpoint layout (``.npz``, format version 1):

    meta                 0-d unicode array holding a JSON object:
                           format, version, iteration, adam_steps, alpha_d,
                           rng_state, config (key -> formatted value), arch
    param/<name>         one array per trainable parameter, e.g.
                           param/base.W0, param/disp.b3, param/color.W2,
                           param/log_s (shape ())
    adam_m/<name>        first Adam moment, same shape as the parameter
    adam_v/<name>        second Adam moment
    history              (n, 4) float64: iteration, loss, radiance, eikonal

``arch`` stores the skip index and activation of every MLP so the networks
can be rebuilt without re-running initialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Var
from .config import Config, format_value
from .encoding import EncodingConfig
from .networks import (CompositeSdf, MlpParams, init_color_mlp, init_displacement_mlp,
                       init_sdf_mlp)
from .renderer import NeuralScene

CHECKPOINT_FORMAT = "sdfrender-checkpoint"
CHECKPOINT_VERSION = 1
BASE_ONLY_ALPHA = 0.25  # frozen base window when coarse-to-fine is off


class CheckpointError(ValueError):
    pass


@dataclass
class Model:
    sdf: CompositeSdf
    color: MlpParams
    log_s: Var
    adaptive: bool = True
    c2f: bool = True

    @property
    def s(self) -> float:
        return float(np.exp(self.log_s.value))

    def params(self) -> dict[str, Var]:
        out = self.sdf.params()
        out.update(self.color.named("color"))
        out["log_s"] = self.log_s
        return out

    def scene(self, s=None) -> NeuralScene:
        return NeuralScene(self.sdf, self.color, self.s if s is None else s)

    def set_alpha_d(self, alpha_d: float) -> None:
        self.sdf.alpha_d = float(alpha_d)


def build_model(cfg: Config, rng: np.random.Generator | None = None) -> Model:
    rng = rng if rng is not None else np.random.default_rng(cfg["train.seed"])
    dtype = np.dtype(cfg["model.dtype"])
    L, inc = cfg["pe.bands"], cfg["pe.include_input"]
    enc = EncodingConfig(L, 1.0, inc)
    base = init_sdf_mlp(enc, cfg["model.hidden"], cfg["model.depth"], cfg["model.feature"], rng,
                        cfg["model.init_radius"], dtype=dtype)
    disp = None
    if cfg["model.idf"]:
        disp = init_displacement_mlp(enc, cfg["model.hidden"], cfg["model.depth"], rng,
                                     dtype=dtype)
    color = init_color_mlp(cfg["model.feature"], cfg["model.color_hidden"],
                           cfg["model.color_depth"], rng, dtype=dtype)
    alpha_b = None if cfg["model.c2f"] else BASE_ONLY_ALPHA
    sdf = CompositeSdf(base, disp, L, cfg["pe.alpha_d0"], inc, alpha_b)
    log_s = Var(np.array(np.log(cfg["train.s_init"]), dtype=dtype), requires_grad=True)
    return Model(sdf, color, log_s, cfg["model.adaptive"], cfg["model.c2f"])


@dataclass
class TrainState:
    """Everything needed to resume training bit-exactly."""

    model: Model
    config: Config
    rng: np.random.Generator
    iteration: int = 0
    adam_steps: int = 0
    alpha_d: float = 0.5
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    history: list = field(default_factory=list)  # (iteration, loss, rad, eik)

    def __post_init__(self):
        for k, p in self.model.params().items():
            self.m.setdefault(k, np.zeros_like(p.value))
            self.v.setdefault(k, np.zeros_like(p.value))
        self.model.set_alpha_d(self.alpha_d)

    @property
    def alpha_b(self) -> float:
        return self.model.sdf.alpha_b


def init_state(cfg: Config) -> TrainState:
    model = build_model(cfg)
    rng = np.random.default_rng([cfg["train.seed"], cfg["sample.seed"]])
    return TrainState(model, cfg, rng, alpha_d=cfg["pe.alpha_d0"])


def _arch(model: Model) -> dict:
    def mlp(p: MlpParams | None):
        if p is None:
            return None
        return {"depth": p.depth, "skip": p.skip, "activation": p.activation}
    sdf = model.sdf
    return {"base": mlp(sdf.base), "disp": mlp(sdf.displacement), "color": mlp(model.color),
            "L": sdf.L, "include_input": sdf.include_input,
            "alpha_b_override": sdf.alpha_b_override, "adaptive": model.adaptive,
            "c2f": model.c2f}


def save_checkpoint(path, state: TrainState) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "iteration": state.iteration, "adam_steps": state.adam_steps,
            "alpha_d": state.alpha_d, "rng_state": state.rng.bit_generator.state,
            "config": {k: format_value(v) for k, v in state.config.items()},
            "arch": _arch(state.model)}
    arrays = {"meta": np.array(json.dumps(meta))}
    for k, p in state.model.params().items():
        arrays[f"param/{k}"] = p.value
        arrays[f"adam_m/{k}"] = state.m[k]
        arrays[f"adam_v/{k}"] = state.v[k]
    arrays["history"] = np.asarray(state.history, dtype=np.float64).reshape(-1, 4)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _rebuild_mlp(arrays, prefix, spec) -> MlpParams:
    Ws, bs = [], []
    for k in range(spec["depth"]):
        Ws.append(Var(arrays[f"param/{prefix}.W{k}"], requires_grad=True))
        bs.append(Var(arrays[f"param/{prefix}.b{k}"], requires_grad=True))
    return MlpParams(Ws, bs, spec["skip"], spec["activation"])


def load_checkpoint(path) -> TrainState:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    try:
        with np.load(p, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(str(arrays["meta"]))
    except (ValueError, KeyError, OSError, EOFError) as exc:
        raise CheckpointError(f"unreadable checkpoint {p}: {exc}") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{p} is not a checkpoint file")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    cfg = Config(meta["config"])
    arch = meta["arch"]
    base = _rebuild_mlp(arrays, "base", arch["base"])
    disp = _rebuild_mlp(arrays, "disp", arch["disp"]) if arch["disp"] else None
    color = _rebuild_mlp(arrays, "color", arch["color"])
    sdf = CompositeSdf(base, disp, arch["L"], meta["alpha_d"], arch["include_input"],
                       arch["alpha_b_override"])
    model = Model(sdf, color, Var(arrays["param/log_s"], requires_grad=True),
                  arch["adaptive"], arch["c2f"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    names = model.params().keys()
    state = TrainState(model, cfg, rng, meta["iteration"], meta["adam_steps"], meta["alpha_d"],
                       {k: arrays[f"adam_m/{k}"] for k in names},
                       {k: arrays[f"adam_v/{k}"] for k in names},
                       [tuple(r) for r in arrays["history"]])
    return state


def scene_from_checkpoint(path):
    """``(NeuralScene, state)`` for rendering, probing or extraction."""
    state = load_checkpoint(path)
    return state.model.scene(), state
