"""Small reverse-mode differentiation engine over float64 numpy arrays.

Expressions are immutable graphs of :class:`Expr` nodes.  Values are never
stored on the graph itself: :func:`trace` runs a forward pass into a private
buffer, and :func:`gradient` walks that buffer in reverse topological order.
A graph can therefore be built once and re-evaluated with fresh bindings on
every training step.

Row-wise ops (``l2norm``, ``l2_normalize``, ``dot``, ``cosine``) work along
the last axis, so a batch of vectors is just a 2-D array.  ``add``, ``sub``
and ``mul`` follow numpy broadcasting; their adjoints sum over broadcast axes.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import count
from typing import Callable, Mapping, Sequence

import numpy as np

COSINE_EPS = 1e-12
BN_EPS = 1e-5

_ids = count()


class DiffMathError(Exception):
    pass


class UnboundInputError(DiffMathError):
    pass


class ShapeError(DiffMathError):
    pass


class DegenerateDirectionError(DiffMathError):
    """A normalized direction had (numerically) zero length."""

    def __init__(self, index, norm: float):
        self.index = index
        self.norm = norm
        super().__init__(f"degenerate direction {index}: norm {norm:.3e} below threshold")


class Expr:
    __slots__ = ("op", "args", "attrs", "name", "uid")

    def __init__(self, op: str, args: Sequence["Expr"] = (), name: str | None = None, **attrs):
        if op not in OPS and op not in ("input", "const"):
            raise DiffMathError(f"unknown op {op!r}")
        self.op = op
        self.args = tuple(args)
        self.attrs = attrs
        self.name = name
        self.uid = next(_ids)

    def __repr__(self):
        label = self.name or self.attrs.get("tag")
        return f"<{self.op}#{self.uid}{'' if label is None else ' ' + str(label)}>"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> Expr:
    return x if isinstance(x, Expr) else const(x)


# -- constructors ------------------------------------------------------------

def input(name: str) -> Expr:  # noqa: A001 - mirrors the node kind
    return Expr("input", name=name)


def const(value) -> Expr:
    arr = np.array(value, dtype=np.float64)
    arr.flags.writeable = False
    return Expr("const", value=arr)


def add(a, b):
    return Expr("add", (a, b))


def sub(a, b):
    return Expr("sub", (a, b))


def mul(a, b):
    return Expr("mul", (a, b))


def scale(x, c: float):
    return Expr("scale", (x,), c=float(c))


def matvec(A, x):
    """``A @ x`` for a vector ``x`` or row-wise for a batch ``x`` of shape (B, n)."""
    return Expr("matvec", (A, x))


def matmul(A, B):
    return Expr("matmul", (A, B))


def transpose(x):
    return Expr("transpose", (x,))


def tanh(x):
    return Expr("tanh", (x,))


def relu(x):
    return Expr("relu", (x,))


def exp(x):
    return Expr("exp", (x,))


def log(x):
    return Expr("log", (x,))


def batchnorm(x, gain, shift, training=True, running_mean=None, running_var=None, eps=BN_EPS):
    """Per-feature standardization over the batch axis of a (B, n) input.

    In training mode batch statistics are used (biased variance); otherwise the
    supplied running statistics are treated as constants.
    """
    if not training and (running_mean is None or running_var is None):
        raise DiffMathError("inference-mode batchnorm needs running statistics")
    attrs = dict(training=training, eps=eps)
    if not training:
        attrs["running_mean"] = np.asarray(running_mean, dtype=np.float64)
        attrs["running_var"] = np.asarray(running_var, dtype=np.float64)
    return Expr("batchnorm", (x, gain, shift), **attrs)


def l2norm(x):
    return Expr("l2norm", (x,))


def l2_normalize(x, eps: float = 0.0, min_norm: float | None = None, tag=None):
    """``x / (||x|| + eps)`` along the last axis.

    With ``min_norm`` set, evaluation raises :class:`DegenerateDirectionError`
    carrying ``tag`` whenever a row norm falls below it.
    """
    return Expr("l2_normalize", (x,), eps=eps, min_norm=min_norm, tag=tag)


def dot(x, y):
    return Expr("dot", (x, y))


def cosine(x, y, eps: float = COSINE_EPS):
    return Expr("cosine", (x, y), eps=eps)


def sum(x, axis=None):  # noqa: A001
    return Expr("sum", (x,), axis=axis)


def mean(x, axis=None):
    return Expr("mean", (x,), axis=axis)


def stack(xs: Sequence[Expr], axis: int = 0):
    return Expr("stack", tuple(xs), axis=axis)


def reshape(x, shape):
    return Expr("reshape", (x,), shape=tuple(shape))


# -- forward / adjoint rules -------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _norm(x):
    return np.sqrt(np.sum(x * x, axis=-1))


def _f_add(v, a):
    return v[0] + v[1]


def _b_add(g, v, out, a):
    return _unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)


def _f_sub(v, a):
    return v[0] - v[1]


def _b_sub(g, v, out, a):
    return _unbroadcast(g, v[0].shape), -_unbroadcast(g, v[1].shape)


def _f_mul(v, a):
    return v[0] * v[1]


def _b_mul(g, v, out, a):
    return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)


def _f_scale(v, a):
    return a["c"] * v[0]


def _b_scale(g, v, out, a):
    return (a["c"] * g,)


def _f_matvec(v, a):
    A, x = v
    if A.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != A.shape[1]:
        raise ValueError(f"matvec of {A.shape} with {x.shape}")
    return x @ A.T


def _b_matvec(g, v, out, a):
    A, x = v
    if x.ndim == 1:
        return np.outer(g, x), g @ A
    return g.T @ x, g @ A


def _f_matmul(v, a):
    A, B = v
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul of {A.shape} with {B.shape}")
    return A @ B


def _b_matmul(g, v, out, a):
    return g @ v[1].T, v[0].T @ g


def _f_transpose(v, a):
    if v[0].ndim != 2:
        raise ValueError(f"transpose of {v[0].shape}")
    return v[0].T


def _b_transpose(g, v, out, a):
    return (g.T,)


def _f_tanh(v, a):
    return np.tanh(v[0])


def _b_tanh(g, v, out, a):
    return (g * (1.0 - out * out),)


def _f_relu(v, a):
    return np.maximum(v[0], 0.0)


def _b_relu(g, v, out, a):
    return (g * (v[0] > 0.0),)


def _f_exp(v, a):
    return np.exp(v[0])


def _b_exp(g, v, out, a):
    return (g * out,)


def _f_log(v, a):
    return np.log(v[0])


def _b_log(g, v, out, a):
    return (g / v[0],)


def _bn_stats(x, a):
    if a["training"]:
        return x.mean(axis=0), x.var(axis=0)
    return a["running_mean"], a["running_var"]


def _f_batchnorm(v, a):
    x, gain, shift = v
    if x.ndim != 2 or gain.shape != x.shape[1:] or shift.shape != x.shape[1:]:
        raise ValueError(f"batchnorm of {x.shape} with gain {gain.shape}, shift {shift.shape}")
    mu, var = _bn_stats(x, a)
    return gain * (x - mu) / np.sqrt(var + a["eps"]) + shift


def _b_batchnorm(g, v, out, a):
    x, gain, shift = v
    mu, var = _bn_stats(x, a)
    inv = 1.0 / np.sqrt(var + a["eps"])
    xhat = (x - mu) * inv
    dgain = np.sum(g * xhat, axis=0)
    dshift = np.sum(g, axis=0)
    if a["training"]:
        dx = gain * inv * (g - g.mean(axis=0) - xhat * np.mean(g * xhat, axis=0))
    else:
        dx = g * gain * inv
    return dx, dgain, dshift


def _f_l2norm(v, a):
    return _norm(v[0])


def _b_l2norm(g, v, out, a):
    n = out[..., None]
    safe = np.where(n > 0, n, 1.0)
    return (np.where(n > 0, g[..., None] * v[0] / safe, 0.0),)


def _f_l2_normalize(v, a):
    x = v[0]
    n = _norm(x)
    if a["min_norm"] is not None:
        low = np.atleast_1d(n < a["min_norm"])
        if low.any():
            raise DegenerateDirectionError(a["tag"], float(np.min(n)))
    return x / (n + a["eps"])[..., None]


def _b_l2_normalize(g, v, out, a):
    x = v[0]
    n = _norm(x)[..., None]
    s = n + a["eps"]
    gx = np.sum(g * x, axis=-1, keepdims=True)
    safe = np.where(n > 0, n, 1.0)
    corr = np.where(n > 0, x * gx / (safe * s * s), 0.0)
    return (g / s - corr,)


def _f_dot(v, a):
    if v[0].shape[-1] != v[1].shape[-1]:
        raise ValueError(f"dot of {v[0].shape} with {v[1].shape}")
    return np.sum(v[0] * v[1], axis=-1)


def _b_dot(g, v, out, a):
    g = g[..., None]
    return _unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)


def _f_cosine(v, a):
    x, y = v
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"cosine of {x.shape} with {y.shape}")
    return np.sum(x * y, axis=-1) / ((_norm(x) + a["eps"]) * (_norm(y) + a["eps"]))


def _b_cosine(g, v, out, a):
    x, y = v
    nx, ny = _norm(x)[..., None], _norm(y)[..., None]
    sx, sy = nx + a["eps"], ny + a["eps"]
    xy = np.sum(x * y, axis=-1, keepdims=True)
    g = g[..., None]
    ux = np.where(nx > 0, x / np.where(nx > 0, nx, 1.0), 0.0)
    uy = np.where(ny > 0, y / np.where(ny > 0, ny, 1.0), 0.0)
    dx = g * (y / (sx * sy) - xy * ux / (sx * sx * sy))
    dy = g * (x / (sx * sy) - xy * uy / (sx * sy * sy))
    return _unbroadcast(dx, x.shape), _unbroadcast(dy, y.shape)


def _f_sum(v, a):
    return np.sum(v[0], axis=a["axis"])


def _b_sum(g, v, out, a):
    ax = a["axis"]
    if ax is not None:
        g = np.expand_dims(g, ax)
    return (np.broadcast_to(g, v[0].shape).copy(),)


def _f_mean(v, a):
    return np.mean(v[0], axis=a["axis"])


def _b_mean(g, v, out, a):
    ax = a["axis"]
    n = v[0].size if ax is None else v[0].shape[ax]
    if ax is not None:
        g = np.expand_dims(g, ax)
    return (np.broadcast_to(g / n, v[0].shape).copy(),)


def _f_stack(v, a):
    return np.stack(v, axis=a["axis"])


def _b_stack(g, v, out, a):
    return tuple(np.moveaxis(g, a["axis"], 0))


def _f_reshape(v, a):
    return v[0].reshape(a["shape"])


def _b_reshape(g, v, out, a):
    return (g.reshape(v[0].shape),)


Forward = Callable[[list, dict], np.ndarray]
Backward = Callable[[np.ndarray, list, np.ndarray, dict], tuple]

OPS: dict[str, tuple[Forward, Backward]] = {
    "add": (_f_add, _b_add),
    "sub": (_f_sub, _b_sub),
    "mul": (_f_mul, _b_mul),
    "scale": (_f_scale, _b_scale),
    "matvec": (_f_matvec, _b_matvec),
    "matmul": (_f_matmul, _b_matmul),
    "transpose": (_f_transpose, _b_transpose),
    "tanh": (_f_tanh, _b_tanh),
    "relu": (_f_relu, _b_relu),
    "exp": (_f_exp, _b_exp),
    "log": (_f_log, _b_log),
    "batchnorm": (_f_batchnorm, _b_batchnorm),
    "l2norm": (_f_l2norm, _b_l2norm),
    "l2_normalize": (_f_l2_normalize, _b_l2_normalize),
    "dot": (_f_dot, _b_dot),
    "cosine": (_f_cosine, _b_cosine),
    "sum": (_f_sum, _b_sum),
    "mean": (_f_mean, _b_mean),
    "stack": (_f_stack, _b_stack),
    "reshape": (_f_reshape, _b_reshape),
}


def register_op(name: str, forward: Forward, backward: Backward) -> None:
    """Add a primitive.  Build nodes for it with ``Expr(name, args, **attrs)``."""
    if name in OPS or name in ("input", "const"):
        raise DiffMathError(f"op {name!r} already defined")
    OPS[name] = (forward, backward)


# -- evaluation --------------------------------------------------------------

def topo_order(root: Expr) -> list[Expr]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if node.uid in seen:
            continue
        seen.add(node.uid)
        stack_.append((node, True))
        for arg in reversed(node.args):
            if arg.uid not in seen:
                stack_.append((arg, False))
    return order


@dataclass
class Trace:
    """Forward values of every node reachable from ``root``, keyed by node uid."""

    root: Expr
    order: list[Expr]
    values: dict[int, np.ndarray]

    @property
    def output(self) -> np.ndarray:
        return self.values[self.root.uid]

    def __getitem__(self, node: Expr) -> np.ndarray:
        return self.values[node.uid]


def trace(expr: Expr, bindings: Mapping[str, np.ndarray], dtype=np.float64) -> Trace:
    order = topo_order(expr)
    values: dict[int, np.ndarray] = {}
    for node in order:
        if node.op == "input":
            if node.name not in bindings:
                raise UnboundInputError(f"input {node.name!r} is not bound")
            values[node.uid] = np.asarray(bindings[node.name], dtype=dtype)
        elif node.op == "const":
            values[node.uid] = node.attrs["value"]
        else:
            fwd = OPS[node.op][0]
            args = [values[a.uid] for a in node.args]
            try:
                values[node.uid] = np.asarray(fwd(args, node.attrs), dtype=dtype)
            except ValueError as exc:
                raise ShapeError(f"{node!r}: {exc}") from None
    return Trace(expr, order, values)


def evaluate(expr: Expr, bindings: Mapping[str, np.ndarray] | None = None, dtype=np.float64) -> np.ndarray:
    return trace(expr, bindings or {}, dtype).output


def backward(tr: Trace, wrt: Sequence[str]) -> dict[str, np.ndarray]:
    out = tr.output
    if out.size != 1:
        raise ShapeError(f"gradient needs a scalar root, got shape {out.shape}")
    adj: dict[int, np.ndarray] = {tr.root.uid: np.ones_like(out)}
    grads = {name: None for name in wrt}
    for node in reversed(tr.order):
        g = adj.pop(node.uid, None)
        if g is None:
            continue
        if node.op == "input":
            if node.name in grads:
                grads[node.name] = g if grads[node.name] is None else grads[node.name] + g
            continue
        if node.op == "const":
            continue
        bwd = OPS[node.op][1]
        arg_vals = [tr.values[a.uid] for a in node.args]
        for arg, ga in zip(node.args, bwd(g, arg_vals, tr.values[node.uid], node.attrs)):
            if arg.op == "const":
                continue
            adj[arg.uid] = ga if arg.uid not in adj else adj[arg.uid] + ga
    for name in wrt:
        if name not in {n.name for n in tr.order if n.op == "input"}:
            raise UnboundInputError(f"no input named {name!r} in expression")
    # inputs the root does not depend on get a zero gradient
    shapes = {n.name: tr.values[n.uid].shape for n in tr.order if n.op == "input"}
    return {k: (np.zeros(shapes[k]) if v is None else v) for k, v in grads.items()}


def gradient(expr: Expr, bindings: Mapping[str, np.ndarray], wrt: Sequence[str]) -> dict[str, np.ndarray]:
    return backward(trace(expr, bindings), wrt)


@dataclass
class GradientReport:
    analytic: dict[str, np.ndarray]
    numeric: dict[str, np.ndarray]
    max_rel_error: float
    passed: bool


def relative_error(a, n):
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def numeric_gradient(expr: Expr, bindings: Mapping[str, np.ndarray], name: str, eps: float,
                     dtype=np.float64) -> np.ndarray:
    """Central differences.  ``dtype=np.longdouble`` evaluates the forward passes in extended
    precision (where the platform has it) so near-zero gradients are not swamped by roundoff."""
    base = {k: np.array(v, dtype=dtype) for k, v in bindings.items()}
    x = base[name]
    grad = np.zeros(x.shape)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = evaluate(expr, base, dtype)[()]
        x[idx] = orig - eps
        fm = evaluate(expr, base, dtype)[()]
        x[idx] = orig
        grad[idx] = float((fp - fm) / (2 * dtype(eps)))
    return grad


def check_gradient(expr: Expr, bindings: Mapping[str, np.ndarray], wrt: Sequence[str],
                   eps: float = 1e-5, tol: float = 1e-6, numeric_dtype=np.float64) -> GradientReport:
    if eps <= 0 or tol <= 0:
        raise ValueError("eps and tol must be positive")
    analytic = gradient(expr, bindings, wrt)
    numeric = {name: numeric_gradient(expr, bindings, name, eps, numeric_dtype) for name in wrt}
    worst = 0.0
    for name in wrt:
        if analytic[name].size:
            worst = max(worst, float(np.max(relative_error(analytic[name], numeric[name]))))
    return GradientReport(analytic, numeric, worst, worst < tol)
