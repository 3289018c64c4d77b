"""Base, displacement and color networks, and their composition.

The composed field displaces the query point along the base normal before
evaluating the base network::

    f(x) = f_b(x - 4 Psi'_{k}(f_b(x)) f_d(x) n),   k = 0.01 min(s, 1e3)

with ``n = grad f_b(x) / |grad f_b(x)|`` held constant.  Because ``Psi'``
vanishes away from the zero level set the displacement only acts near the
surface.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Var
from .encoding import EncodingConfig, encode
from .transparency import psi_prime

SOFTPLUS_BETA = 100.0
CONSTRAINT_SCALE_FACTOR = 0.01
CONSTRAINT_SCALE_MAX = 1e3


class ShapeMismatchError(ValueError):
    pass


@dataclass
class MlpParams:
    """Linear layers ``h @ W + b``; the skip layer sees ``[h, input] / sqrt(2)``."""

    weights: list[Var]
    biases: list[Var]
    skip: int | None = None
    activation: str = "softplus"

    def __post_init__(self):
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[1],):
                raise ShapeMismatchError(f"layer {k}: bias {b.shape} vs weight {W.shape}")
            if k + 1 < len(self.weights):
                nxt = self.weights[k + 1].shape[0]
                expect = W.shape[1] + (self.in_dim if self.skip == k + 1 else 0)
                if nxt != expect:
                    raise ShapeMismatchError(f"layer {k + 1} expects {nxt} inputs, gets {expect}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def named(self, prefix: str) -> dict[str, Var]:
        out = {}
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{k}"] = W
            out[f"{prefix}.b{k}"] = b
        return out

    def astype(self, dtype) -> "MlpParams":
        cast = [Var(v.value.astype(dtype), requires_grad=True) for v in self.weights]
        castb = [Var(v.value.astype(dtype), requires_grad=True) for v in self.biases]
        return MlpParams(cast, castb, self.skip, self.activation)


def _layer_dims(in_dim, hidden, depth, out_dim, skip):
    dims = []
    for k in range(depth):
        d_in = in_dim if k == 0 else hidden + (in_dim if skip == k else 0)
        d_out = out_dim if k == depth - 1 else hidden
        dims.append((d_in, d_out))
    return dims


def _params(arrays, skip, activation, dtype):
    Ws = [Var(W.astype(dtype), requires_grad=True) for W, _ in arrays]
    bs = [Var(b.astype(dtype), requires_grad=True) for _, b in arrays]
    return MlpParams(Ws, bs, skip, activation)


def init_sdf_mlp(cfg: EncodingConfig, hidden: int, depth: int, feature_width: int,
                 rng: np.random.Generator, init_radius: float = 0.5,
                 skip: int | None = -1, dtype=np.float64) -> MlpParams:
    """Geometric initialization: the output starts close to ``|x| - init_radius``.

    Only the raw-coordinate inputs get nonzero first-layer weights, so the
    encoded bands start switched off regardless of the window.
    """
    in_dim = cfg.width
    if skip == -1:
        skip = depth // 2 if depth > 2 else None
    raw = slice(in_dim - 3, in_dim) if cfg.include_input else slice(0, 0)
    arrays = []
    for k, (d_in, d_out) in enumerate(_layer_dims(in_dim, hidden, depth, 1 + feature_width, skip)):
        b = np.zeros(d_out)
        if k == depth - 1:
            W = rng.normal(np.sqrt(np.pi) / np.sqrt(d_in), 1e-4, size=(d_in, d_out))
            b[:] = -init_radius
        elif k == 0:
            W = np.zeros((d_in, d_out))
            W[raw] = rng.normal(0.0, np.sqrt(2) / np.sqrt(d_out), size=(3, d_out))
        else:
            W = rng.normal(0.0, np.sqrt(2) / np.sqrt(d_out), size=(d_in, d_out))
            if k == skip:
                W[hidden:] = 0.0
                if cfg.include_input:
                    W[hidden + in_dim - 3:] = rng.normal(0.0, np.sqrt(2) / np.sqrt(d_out),
                                                         size=(3, d_out))
        arrays.append((W, b))
    return _params(arrays, skip, "softplus", dtype)


def init_displacement_mlp(cfg: EncodingConfig, hidden: int, depth: int,
                          rng: np.random.Generator, skip: int | None = -1,
                          dtype=np.float64) -> MlpParams:
    """Softplus MLP whose last layer is zero, so the displacement starts at 0.

    As for the base network, encoded inputs start with zero weights in the
    first and skip layers; otherwise the first optimizer steps on the output
    layer already create large high-frequency gradients.
    """
    in_dim = cfg.width
    if skip == -1:
        skip = depth // 2 if depth > 2 else None
    raw = slice(in_dim - 3, in_dim) if cfg.include_input else slice(0, 0)
    arrays = []
    for k, (d_in, d_out) in enumerate(_layer_dims(in_dim, hidden, depth, 1, skip)):
        std = np.sqrt(2) / np.sqrt(d_out)
        if k == depth - 1:
            W = np.zeros((d_in, d_out))
        elif k == 0:
            W = np.zeros((d_in, d_out))
            W[raw] = rng.normal(0.0, std, size=(3, d_out))
        else:
            W = rng.normal(0.0, std, size=(d_in, d_out))
            if k == skip:
                W[hidden:] = 0.0
                if cfg.include_input:
                    W[hidden + in_dim - 3:] = rng.normal(0.0, std, size=(3, d_out))
        arrays.append((W, np.zeros(d_out)))
    return _params(arrays, skip, "softplus", dtype)


def init_color_mlp(feature_width: int, hidden: int, depth: int, rng: np.random.Generator,
                   dtype=np.float64) -> MlpParams:
    in_dim = 9 + feature_width
    arrays = []
    for k, (d_in, d_out) in enumerate(_layer_dims(in_dim, hidden, depth, 3, None)):
        std = np.sqrt(2) / np.sqrt(d_in) if k < depth - 1 else 1.0 / np.sqrt(d_in)
        arrays.append((rng.normal(0.0, std, size=(d_in, d_out)), np.zeros(d_out)))
    return _params(arrays, None, "relu", dtype)


def mlp_forward(params: MlpParams, inp):
    """Run the MLP on ``(N, in_dim)`` input; the last layer is linear."""
    if ad.value_of(inp).shape[-1] != params.in_dim:
        raise ShapeMismatchError(
            f"input width {ad.value_of(inp).shape[-1]} != first layer {params.in_dim}")
    h = inp
    inv_sqrt2 = float(1.0 / np.sqrt(2.0))
    last = params.depth - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        if k == params.skip:
            h = ad.concat([h, inp], axis=-1) * inv_sqrt2
        h = h @ W + b
        if k < last:
            if params.activation == "softplus":
                h = ad.softplus(h, SOFTPLUS_BETA)
            else:
                h = ad.relu(h)
    return h


def current_tape() -> GradientTape | None:
    return ad.current_tape()


@contextlib.contextmanager
def _spatial_tape():
    """Yield ``(tape, create_graph)``: the active tape, or a private one."""
    tape = current_tape()
    if tape is not None:
        yield tape, True
    else:
        with ad.isolated(), GradientTape() as private:
            yield private, False


def grad_spatial(tape: GradientTape, f, x, create_graph: bool = False):
    """Per-point ``df/dx`` for a batch of independent points (``f`` is ``(N,)``)."""
    if not isinstance(f, Var) or not f.requires_grad:
        raise ad.TapeError("f was not recorded on a tape with x as a watched input")
    (g,) = tape.gradient(f, [x], create_graph=create_graph)
    return g


def color_forward(params: MlpParams, x, normal, view_dir, feature):
    """View-dependent RGB in [0, 1] from position, normal, direction and feature."""
    inp = ad.concat([x, normal, view_dir, feature], axis=-1)
    return ad.sigmoid(mlp_forward(params, inp))


class FieldOutput(NamedTuple):
    sdf: object
    grad: object
    base_grad: object
    feature: object
    flagged: np.ndarray
    base_sdf: object
    shift: object


@dataclass
class CompositeSdf:
    """Base SDF network plus optional displacement network."""

    base: MlpParams
    displacement: MlpParams | None
    L: int = 16
    alpha_d: float = 0.5
    include_input: bool = True
    alpha_b_override: float | None = None

    @property
    def alpha_b(self) -> float:
        if self.alpha_b_override is not None:
            return self.alpha_b_override
        return 0.5 * self.alpha_d

    @property
    def base_encoding(self) -> EncodingConfig:
        return EncodingConfig(self.L, self.alpha_b, self.include_input)

    @property
    def displacement_encoding(self) -> EncodingConfig:
        return EncodingConfig(self.L, self.alpha_d, self.include_input)

    @property
    def dtype(self):
        return self.base.weights[0].dtype

    def params(self) -> dict[str, Var]:
        out = self.base.named("base")
        if self.displacement is not None:
            out.update(self.displacement.named("disp"))
        return out

    def forward(self, x, s, normal=None) -> FieldOutput:
        """Evaluate value, spatial gradient and color feature at ``(N, 3)`` points.

        Inside an active tape the spatial gradients stay differentiable
        (parameters receive second-order terms); otherwise plain arrays are
        returned.  ``normal`` replaces the displacement direction (normally
        the unit base gradient at ``x``); it is a constant either way.
        """
        if not isinstance(x, Var):
            x = Var(np.asarray(x, dtype=self.dtype))
        x.requires_grad = True
        n_pts = x.shape[0]
        # s stays on the tape so log s also learns through the shift
        s = s if isinstance(s, Var) else np.asarray(s, dtype=self.dtype)
        s_c = CONSTRAINT_SCALE_FACTOR * ad.minimum_const(s, CONSTRAINT_SCALE_MAX)
        with _spatial_tape() as (tape, create_graph):
            out_b = mlp_forward(self.base, encode(x, self.base_encoding))
            fb = out_b[:, 0]
            gb = grad_spatial(tape, fb, x, create_graph)
            flagged = np.zeros(n_pts, dtype=bool)
            if self.displacement is None:
                return FieldOutput(fb, gb, gb, out_b[:, 1:], flagged, fb, None)

            gbv = ad.value_of(gb)
            gnorm = np.linalg.norm(gbv, axis=-1, keepdims=True)
            flagged = gnorm[:, 0] < 1e-8
            if normal is None:
                normal = np.where(flagged[:, None], 0.0,
                                  gbv / np.where(flagged[:, None], 1.0, gnorm))
            normal = np.asarray(normal)
            fd = mlp_forward(self.displacement, encode(x, self.displacement_encoding))[:, 0]
            shift = 4.0 * psi_prime(s_c, fb) * fd
            y = x - ad.reshape(shift, (n_pts, 1)) * normal.astype(self.dtype)
            out = mlp_forward(self.base, encode(y, self.base_encoding))
            f = out[:, 0]
            g = grad_spatial(tape, f, x, create_graph)
        return FieldOutput(f, g, gb, out[:, 1:], flagged, fb, shift)

    def evaluate(self, x, s, chunk: int = 8192):
        """Arrays ``(values, gradients)`` for points ``(N, 3)``; no parameter graph."""
        x = np.asarray(x, dtype=self.dtype)
        vals, grads = [], []
        for start in range(0, len(x), chunk):
            with ad.isolated():
                o = self.forward(x[start:start + chunk], s)
            vals.append(ad.value_of(o.sdf))
            grads.append(ad.value_of(o.grad))
        return np.concatenate(vals), np.concatenate(grads)


def composite_sdf(c: CompositeSdf, x, s: float):
    """``(value, gradient)`` of the composed field at a single point or a batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    v, g = c.evaluate(np.atleast_2d(x), s)
    return (float(v[0]), g[0]) if single else (v, g)
