"""Vectorized reverse-mode differentiation over numpy arrays.

A :class:`GradientTape` records every operation applied to tracked
:class:`Var` objects while it is active.  :meth:`GradientTape.gradient`
performs the reverse sweep.  Vector-Jacobian products are themselves written
with the operations in this module, so a sweep run with
``create_graph=True`` is recorded on the tape and can be differentiated
again.  This is how spatial SDF gradients (needed by the density and the
Eikonal term) receive parameter gradients.

Every operation is polymorphic: with plain ``ndarray`` inputs it returns a
plain ``ndarray``, so the same model code runs with or without a tape.

Example::

    w = Var(np.ones(3), requires_grad=True)
    with GradientTape() as tape:
        y = sum(sin(w) * w)
    (dw,) = tape.gradient(y, [w])
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Var", "GradientTape", "TapeError", "no_record", "isolated", "current_tape", "stop_gradient", "value_of",
    "exp", "log", "sin", "cos", "sqrt", "abs", "sigmoid", "softplus", "relu",
    "sum", "mean", "reshape", "concat", "where", "cumsum", "norm",
    "minimum_const", "matmul", "transpose", "broadcast_to",
]

_TAPES: list["GradientTape"] = []
_PAUSED = [0]


class TapeError(RuntimeError):
    pass


class Var:
    """An array value that may participate in a recorded computation."""

    __array_ufunc__ = None  # make ndarray (op) Var dispatch to Var's reflected ops
    __slots__ = ("value", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)


@dataclass
class Node:
    out: Var
    inputs: tuple
    vjp: Callable  # (g: Var, needed: list[bool]) -> list[Var | None]
    forward: Callable  # (*input_values) -> ndarray, used by replay()
    op: str


@dataclass
class GradientTape:
    """Records operations on tracked variables in execution order.

    The node list is topologically ordered by construction.  Tapes nest; an
    operation is recorded on the innermost active tape.
    """

    nodes: list[Node] = field(default_factory=list)
    active: bool = False

    def __enter__(self):
        _TAPES.append(self)
        self.active = True
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        self.active = False
        return False

    def watch(self, *xs: Var):
        for x in xs:
            x.requires_grad = True

    def gradient(self, target: Var, sources: Sequence[Var], output_grad=None,
                 create_graph: bool = False):
        """Adjoints of ``target`` with respect to each of ``sources``.

        ``output_grad`` seeds the sweep (defaults to ones).  With
        ``create_graph`` the sweep is recorded, and the returned ``Var``s can
        be differentiated again; otherwise plain arrays are returned.
        """
        if not isinstance(target, Var):
            raise TapeError("target is not a Var")
        seed = np.ones_like(target.value) if output_grad is None else np.asarray(output_grad)
        if seed.shape != target.shape:
            raise TapeError(f"output_grad shape {seed.shape} != target shape {target.shape}")

        source_ids = {id(s) for s in sources}
        # nodes whose output depends on some source
        reach = set(source_ids)
        for node in self.nodes:
            if any(id(i) in reach for i in node.inputs if isinstance(i, Var)):
                reach.add(id(node.out))

        n_nodes = len(self.nodes)
        adjoint: dict[int, Var] = {id(target): Var(seed)}
        ctx = contextlib.nullcontext() if create_graph else no_record()
        with ctx:
            for k in range(n_nodes - 1, -1, -1):
                node = self.nodes[k]
                key = id(node.out)
                g = adjoint.get(key) if key in source_ids else adjoint.pop(key, None)
                if g is None:
                    continue
                needed = [isinstance(i, Var) and id(i) in reach for i in node.inputs]
                if not any(needed):
                    continue
                grads = node.vjp(g, needed)
                for inp, need, gi in zip(node.inputs, needed, grads):
                    if not need or gi is None:
                        continue
                    key = id(inp)
                    if key in adjoint:
                        adjoint[key] = adjoint[key] + gi
                    else:
                        adjoint[key] = gi if isinstance(gi, Var) else Var(gi)

        out = []
        for s in sources:
            g = adjoint.get(id(s))
            if g is None:
                g = Var(np.zeros_like(s.value))
            out.append(g if create_graph else g.value)
        return out

    def replay(self) -> bool:
        """Recompute every node from its inputs and compare bit-exactly."""
        ok = True
        for node in self.nodes:
            vals = [value_of(i) for i in node.inputs]
            if not np.array_equal(node.forward(*vals), node.out.value, equal_nan=True):
                ok = False
        return ok


def _recording_tape() -> GradientTape | None:
    if _PAUSED[0] or not _TAPES:
        return None
    return _TAPES[-1]


@contextlib.contextmanager
def no_record():
    """Suspend recording on all tapes (inputs still produce ``Var`` outputs)."""
    _PAUSED[0] += 1
    try:
        yield
    finally:
        _PAUSED[0] -= 1


@contextlib.contextmanager
def isolated():
    """Hide every active tape; tapes opened inside record normally."""
    saved, paused = list(_TAPES), _PAUSED[0]
    _TAPES.clear()
    _PAUSED[0] = 0
    try:
        yield
    finally:
        _TAPES[:] = saved
        _PAUSED[0] = paused


def current_tape():
    return _recording_tape()


def value_of(x):
    return x.value if isinstance(x, Var) else x


def stop_gradient(x):
    return Var(x.value) if isinstance(x, Var) else x


def _make(op: str, value, inputs: tuple, vjp, forward) -> Var:
    out = Var(value)
    tape = _recording_tape()
    if tape is not None and any(isinstance(i, Var) and i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(out, inputs, vjp, forward, op))
    return out


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    gshape = value_of(g).shape
    if gshape == tuple(shape):
        return g
    lead = len(gshape) - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and gshape[i + lead] != 1)
    g = sum(g, axis=axes, keepdims=True)
    return reshape(g, tuple(shape))


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    if not _is_var(a, b):
        return np.add(a, b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    return _make("add", value_of(a) + value_of(b), (a, b),
                 lambda g, n: [_unbroadcast(g, sa) if n[0] else None,
                               _unbroadcast(g, sb) if n[1] else None],
                 np.add)


def sub(a, b):
    if not _is_var(a, b):
        return np.subtract(a, b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    return _make("sub", value_of(a) - value_of(b), (a, b),
                 lambda g, n: [_unbroadcast(g, sa) if n[0] else None,
                               _unbroadcast(neg(g), sb) if n[1] else None],
                 np.subtract)


def mul(a, b):
    if not _is_var(a, b):
        return np.multiply(a, b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    return _make("mul", value_of(a) * value_of(b), (a, b),
                 lambda g, n: [_unbroadcast(g * b, sa) if n[0] else None,
                               _unbroadcast(g * a, sb) if n[1] else None],
                 np.multiply)


def div(a, b):
    if not _is_var(a, b):
        return np.divide(a, b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))

    def vjp(g, n):
        ga = _unbroadcast(g / b, sa) if n[0] else None
        gb = _unbroadcast(neg(g * a / (b * b)), sb) if n[1] else None
        return [ga, gb]

    return _make("div", value_of(a) / value_of(b), (a, b), vjp, np.divide)


def neg(a):
    if not _is_var(a):
        return np.negative(a)
    return _make("neg", -a.value, (a,), lambda g, n: [neg(g)], np.negative)


def power(a, p: float):
    if not _is_var(a):
        return np.power(a, p)
    return _make("pow", a.value ** p, (a,),
                 lambda g, n: [g * (p * power(a, p - 1))],
                 lambda x: x ** p)


FLUSH_MIN_SIZE = 4096


def flush_tiny(x):
    """Entries below ``tiny / eps`` of the dtype set to zero (large arrays only).

    Such values cannot change a sum that holds any normal-scale term, but
    their products underflow to subnormals, on which BLAS is several times
    slower.  Far-from-surface samples produce them in bulk once ``s`` grows.
    """
    x = np.asarray(x)
    if x.size < FLUSH_MIN_SIZE or x.dtype.kind != "f":
        return x
    info = np.finfo(x.dtype)
    mask = np.abs(x) < info.tiny / info.eps
    if not mask.any():
        return x
    x = x.copy()
    x[mask] = 0
    return x


def _flushed_matmul(a, b):
    return np.matmul(flush_tiny(a), flush_tiny(b))


def matmul(a, b):
    if not _is_var(a, b):
        return _flushed_matmul(a, b)

    def vjp(g, n):
        return [matmul(g, transpose(b)) if n[0] else None,
                matmul(transpose(a), g) if n[1] else None]

    return _make("matmul", _flushed_matmul(value_of(a), value_of(b)), (a, b), vjp,
                 _flushed_matmul)


def transpose(a):
    if not _is_var(a):
        return np.transpose(a)
    return _make("transpose", a.value.T, (a,), lambda g, n: [transpose(g)], np.transpose)


# ---------------------------------------------------------------------------
# elementwise functions
# ---------------------------------------------------------------------------

def exp(a):
    if not _is_var(a):
        return np.exp(a)
    out = None

    def vjp(g, n):
        return [g * out]

    out = _make("exp", np.exp(a.value), (a,), vjp, np.exp)
    return out


def log(a):
    if not _is_var(a):
        return np.log(a)
    return _make("log", np.log(a.value), (a,), lambda g, n: [g / a], np.log)


def sin(a):
    if not _is_var(a):
        return np.sin(a)
    return _make("sin", np.sin(a.value), (a,), lambda g, n: [g * cos(a)], np.sin)


def cos(a):
    if not _is_var(a):
        return np.cos(a)
    return _make("cos", np.cos(a.value), (a,), lambda g, n: [neg(g * sin(a))], np.cos)


def sqrt(a):
    if not _is_var(a):
        return np.sqrt(a)
    out = None

    def vjp(g, n):
        return [g * 0.5 / out]

    out = _make("sqrt", np.sqrt(a.value), (a,), vjp, np.sqrt)
    return out


def abs(a):  # noqa: A001
    if not _is_var(a):
        return np.abs(a)
    sign = np.sign(a.value)
    return _make("abs", np.abs(a.value), (a,), lambda g, n: [g * sign], np.abs)


def _sigmoid_np(x):
    # branch on sign so exp never overflows: exp(-|x|) <= 1
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid(a):
    if not _is_var(a):
        return _sigmoid_np(a)
    out = None

    def vjp(g, n):
        return [g * (out * (1.0 - out))]

    out = _make("sigmoid", _sigmoid_np(a.value), (a,), vjp, _sigmoid_np)
    return out


def _softplus_np(x, beta):
    bx = beta * x
    return (np.maximum(bx, 0.0) + np.log1p(np.exp(-np.abs(bx)))) / beta


def _scaled_sigmoid(a, beta: float, value=None):
    """``sigmoid(beta * a)`` as one node; ``value`` may be supplied if known."""
    if value is None:
        value = _sigmoid_np(beta * a.value)
    out = None

    def vjp(g, n):
        return [g * (beta * (out * (1.0 - out)))]

    out = _make("scaled_sigmoid", value, (a,), vjp, lambda x: _sigmoid_np(beta * x))
    return out


def softplus(a, beta: float = 1.0):
    """``log(1 + exp(beta*a)) / beta`` with derivative ``sigmoid(beta*a)``."""
    if not _is_var(a):
        return _softplus_np(a, beta)
    beta = float(beta)
    x = a.value
    bx = beta * x
    e = np.exp(-np.abs(bx))
    value = (np.maximum(bx, 0.0) + np.log1p(e)) / beta
    sig = None  # computed on first use by the backward sweep

    def vjp(g, n):
        nonlocal sig
        if sig is None:
            sig = np.where(bx >= 0, 1.0, e) / (1.0 + e)
        return [g * _scaled_sigmoid(a, beta, sig)]

    return _make("softplus", value.astype(x.dtype, copy=False), (a,), vjp,
                 lambda v: _softplus_np(v, beta))


def relu(a):
    if not _is_var(a):
        return np.maximum(a, 0.0)
    mask = (a.value > 0).astype(a.value.dtype)
    return _make("relu", np.maximum(a.value, 0.0), (a,), lambda g, n: [g * mask],
                 lambda x: np.maximum(x, 0.0))


def minimum_const(a, c: float):
    """``min(a, c)`` for a constant bound; the gradient is zero where clamped."""
    if not _is_var(a):
        return np.minimum(a, c)
    mask = (a.value <= c).astype(a.value.dtype)
    return _make("minimum", np.minimum(a.value, c), (a,), lambda g, n: [g * mask],
                 lambda x: np.minimum(x, c))


def where(cond, a, b):
    cond = np.asarray(value_of(cond), dtype=bool)
    if not _is_var(a, b):
        return np.where(cond, a, b)
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))

    def vjp(g, n):
        z = np.zeros((), dtype=value_of(g).dtype)
        return [_unbroadcast(where(cond, g, z), sa) if n[0] else None,
                _unbroadcast(where(cond, z, g), sb) if n[1] else None]

    return _make("where", np.where(cond, value_of(a), value_of(b)), (a, b), vjp,
                 lambda x, y: np.where(cond, x, y))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    if not _is_var(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g, n):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % len(shape) for ax in axes)
            kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
            g = reshape(g, kshape)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * len(shape))
        return [broadcast_to(g, shape)]

    return _make("sum", np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp,
                 lambda x: np.sum(x, axis=axis, keepdims=keepdims))


def mean(a, axis=None, keepdims=False):
    v = value_of(a)
    count = v.size if axis is None else np.prod([v.shape[ax] for ax in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def broadcast_to(a, shape):
    if not _is_var(a):
        return np.broadcast_to(a, shape)
    src = a.shape
    return _make("broadcast", np.broadcast_to(a.value, shape).copy(), (a,),
                 lambda g, n: [_unbroadcast(g, src)],
                 lambda x: np.broadcast_to(x, shape).copy())


def reshape(a, shape):
    if not _is_var(a):
        return np.reshape(a, shape)
    src = a.shape
    return _make("reshape", a.value.reshape(shape), (a,),
                 lambda g, n: [reshape(g, src)], lambda x: x.reshape(shape))


def getitem(a, index):
    if not _is_var(a):
        return a[index]
    src, dtype = a.shape, a.dtype
    return _make("getitem", a.value[index], (a,),
                 lambda g, n: [_scatter(g, src, index, dtype)], lambda x: x[index])


def _scatter(g, shape, index, dtype):
    """Adjoint of indexing: place ``g`` into zeros of ``shape``."""

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def fwd(gv):
        out = np.zeros(shape, dtype=np.result_type(gv, dtype))
        if basic:
            out[index] += gv
        else:
            np.add.at(out, index, gv)
        return out

    if not _is_var(g):
        return fwd(g)
    return _make("scatter", fwd(g.value), (g,), lambda gg, n: [getitem(gg, index)], fwd)


def concat(xs: Sequence, axis: int = -1):
    if not _is_var(*xs):
        return np.concatenate(xs, axis=axis)
    vals = [value_of(x) for x in xs]
    ndim = vals[0].ndim
    ax = axis % ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def vjp(g, n):
        out = []
        for k, need in enumerate(n):
            if not need:
                out.append(None)
                continue
            sl = [slice(None)] * ndim
            sl[ax] = slice(int(bounds[k]), int(bounds[k + 1]))
            out.append(getitem(g, tuple(sl)))
        return out

    return _make("concat", np.concatenate(vals, axis=ax), tuple(xs), vjp,
                 lambda *v: np.concatenate(v, axis=ax))


def cumsum(a, axis: int = -1, exclusive: bool = False):
    """Cumulative sum; ``exclusive`` shifts so element i sums indices < i."""

    def fwd(x):
        c = np.cumsum(x, axis=axis)
        if exclusive:
            # shift rather than subtract so the result stays monotone in floating point
            c = np.moveaxis(c, axis, -1)
            c = np.concatenate([np.zeros_like(c[..., :1]), c[..., :-1]], axis=-1)
            c = np.moveaxis(c, -1, axis)
        return c

    if not _is_var(a):
        return fwd(a)

    def vjp(g, n):
        # reverse cumulative sum
        rev = [slice(None)] * a.ndim
        rev[axis] = slice(None, None, -1)
        rev = tuple(rev)
        return [getitem(cumsum(getitem(g, rev), axis=axis, exclusive=exclusive), rev)]

    return _make("cumsum", fwd(a.value), (a,), vjp, fwd)


def norm(a, axis: int = -1, keepdims: bool = False):
    """Euclidean norm; the gradient at a zero vector is taken as zero."""
    sq = sum(a * a, axis=axis, keepdims=True)
    if not _is_var(sq):
        r = np.sqrt(sq)
        return r if keepdims else np.squeeze(r, axis=axis)
    sqv = sq.value
    safe = sqv > 0
    r = _make("sqrt", np.sqrt(sqv), (sq,),
              lambda g, n: [where(safe, g * 0.5 / where(safe, r, 1.0), 0.0)],
              np.sqrt)
    return r if keepdims else reshape(r, tuple(np.delete(np.array(sqv.shape), axis % sqv.ndim)))
