"""Reverse-mode automatic differentiation on numpy float64 arrays.

Tensors form an implicit DAG through their input links. ``backward`` walks the
graph from a scalar root in reverse topological order and returns a gradient
map keyed by tensor. Ops are module-level functions; every op validates its
input shapes (no silent broadcasting) and the finiteness of its output, and
raises errors that name the op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class DomainError(ValueError):
    """Raised on domain violations or non-finite values, naming the op."""


class Tensor:
    """Node in the computation graph wrapping a float64 ndarray.

    Leaves are built directly (``Tensor(values, requires_grad=True)`` for
    differentiable inputs); interior nodes are built by ops. ``values`` is
    read-only by convention: ops never mutate their inputs.
    """

    __slots__ = ("values", "op", "inputs", "requires_grad", "_bwd", "_kink")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("tensor: non-finite values in leaf")
        self.values = arr
        self.op = "leaf"
        self.inputs = ()
        self.requires_grad = bool(requires_grad)
        self._bwd = None
        self._kink = None

    @classmethod
    def _node(cls, values, op, inputs, bwd, kink=None):
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"{op}: non-finite values in output")
        t = cls.__new__(cls)
        t.values = arr
        t.op = op
        t.inputs = tuple(inputs)
        t.requires_grad = any(p.requires_grad for p in inputs)
        t._bwd = bwd if t.requires_grad else None
        t._kink = kink
        return t

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, not scalar")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    # Thin operator sugar over the op functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# binary ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul: expects rank-2 inputs, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bwd(g, acc):
        acc(a, g @ bv.T)
        acc(b, av.T @ g)

    return Tensor._node(av @ bv, "matmul", (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def bwd(g, acc):
        acc(a, g)
        acc(b, g)

    return Tensor._node(a.values + b.values, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)

    def bwd(g, acc):
        acc(a, g)
        acc(b, -g)

    return Tensor._node(a.values - b.values, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    _same_shape("mul", a, b)
    av, bv = a.values, b.values

    def bwd(g, acc):
        acc(a, g * bv)
        acc(b, g * av)

    return Tensor._node(av * bv, "mul", (a, b), bwd)


def addrow(m: Tensor, r: Tensor) -> Tensor:
    """Add a length-C vector to every row of an (R, C) matrix."""
    if m.values.ndim != 2 or r.values.ndim != 1 or r.shape[0] != m.shape[1]:
        raise ShapeError(f"addrow: incompatible shapes {m.shape} and {r.shape}")

    def bwd(g, acc):
        acc(m, g)
        acc(r, g.sum(axis=0))

    return Tensor._node(m.values + r.values[None, :], "addrow", (m, r), bwd)


def addcol(m: Tensor, c: Tensor) -> Tensor:
    """Add a length-R vector to every column of an (R, C) matrix."""
    if m.values.ndim != 2 or c.values.ndim != 1 or c.shape[0] != m.shape[0]:
        raise ShapeError(f"addcol: incompatible shapes {m.shape} and {c.shape}")

    def bwd(g, acc):
        acc(m, g)
        acc(c, g.sum(axis=1))

    return Tensor._node(m.values + c.values[:, None], "addcol", (m, c), bwd)


# ---------------------------------------------------------------------------
# scalar-parameter ops

def scale(t: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g, acc):
        acc(t, g * c)

    return Tensor._node(t.values * c, "scale", (t,), bwd)


def shift(t: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g, acc):
        acc(t, g)

    return Tensor._node(t.values + c, "shift", (t,), bwd)


def clip(t: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input lies inside."""
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise DomainError(f"clip: empty interval [{lo}, {hi}]")
    mask = (t.values >= lo) & (t.values <= hi)
    margin = _min_or_inf(np.minimum(np.abs(t.values - lo), np.abs(t.values - hi)))

    def bwd(g, acc):
        acc(t, g * mask)

    return Tensor._node(np.clip(t.values, lo, hi), "clip", (t,), bwd, kink=margin)


# ---------------------------------------------------------------------------
# elementwise nonlinearities

def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.values)

    def bwd(g, acc):
        acc(t, g * (1.0 - out * out))

    return Tensor._node(out, "tanh", (t,), bwd)


def relu(t: Tensor) -> Tensor:
    """max(x, 0); subgradient 0 at the kink."""
    mask = t.values > 0.0
    margin = _min_or_inf(np.abs(t.values))

    def bwd(g, acc):
        acc(t, g * mask)

    return Tensor._node(np.maximum(t.values, 0.0), "relu", (t,), bwd, kink=margin)


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(t.values)
    if not np.all(np.isfinite(out)):
        raise DomainError("exp: overflow to non-finite values")

    def bwd(g, acc):
        acc(t, g * out)

    return Tensor._node(out, "exp", (t,), bwd)


def log(t: Tensor) -> Tensor:
    if np.any(t.values <= 0.0):
        raise DomainError("log: input must be strictly positive")
    tv = t.values

    def bwd(g, acc):
        acc(t, g / tv)

    return Tensor._node(np.log(tv), "log", (t,), bwd)


def sqrt(t: Tensor) -> Tensor:
    """Elementwise square root; subgradient 0 at 0."""
    if np.any(t.values < 0.0):
        raise DomainError("sqrt: input must be non-negative")
    out = np.sqrt(t.values)
    margin = _min_or_inf(t.values)

    def bwd(g, acc):
        with np.errstate(divide="ignore"):
            d = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
        acc(t, g * d)

    return Tensor._node(out, "sqrt", (t,), bwd, kink=margin)


def softplus(t: Tensor) -> Tensor:
    """log(1 + exp(x)) computed stably."""
    tv = t.values

    def bwd(g, acc):
        acc(t, g * (0.5 * (1.0 + np.tanh(0.5 * tv))))  # stable sigmoid

    return Tensor._node(np.logaddexp(0.0, tv), "softplus", (t,), bwd)


def reciprocal(t: Tensor) -> Tensor:
    """1/x for strictly positive x."""
    if np.any(t.values <= 0.0):
        raise DomainError("reciprocal: input must be strictly positive")
    out = 1.0 / t.values

    def bwd(g, acc):
        acc(t, -g * out * out)

    return Tensor._node(out, "reciprocal", (t,), bwd)


def sin(t: Tensor) -> Tensor:
    tv = t.values

    def bwd(g, acc):
        acc(t, g * np.cos(tv))

    return Tensor._node(np.sin(tv), "sin", (t,), bwd)


def cos(t: Tensor) -> Tensor:
    tv = t.values

    def bwd(g, acc):
        acc(t, -g * np.sin(tv))

    return Tensor._node(np.cos(tv), "cos", (t,), bwd)


# ---------------------------------------------------------------------------
# reductions

def sum_all(t: Tensor) -> Tensor:
    shp = t.shape

    def bwd(g, acc):
        acc(t, np.full(shp, float(g)))

    return Tensor._node(np.sum(t.values), "sum", (t,), bwd)


def mean_all(t: Tensor) -> Tensor:
    if t.size == 0:
        raise ShapeError("mean: empty tensor")
    shp, n = t.shape, t.size

    def bwd(g, acc):
        acc(t, np.full(shp, float(g) / n))

    return Tensor._node(np.mean(t.values), "mean", (t,), bwd)


def sqnorm(t: Tensor) -> Tensor:
    """Sum of squared entries (squared Frobenius norm)."""
    tv = t.values

    def bwd(g, acc):
        acc(t, 2.0 * float(g) * tv)

    return Tensor._node(np.sum(tv * tv), "sqnorm", (t,), bwd)


def sum_over_axis(t: Tensor, axis: int) -> Tensor:
    if not -t.values.ndim <= axis < t.values.ndim:
        raise ShapeError(f"sum_over_axis: axis {axis} out of range for shape {t.shape}")
    shp = t.shape

    def bwd(g, acc):
        acc(t, np.broadcast_to(np.expand_dims(g, axis), shp).copy())

    return Tensor._node(np.sum(t.values, axis=axis), "sum_over_axis", (t,), bwd)


def min_over_axis(t: Tensor, axis: int) -> Tensor:
    """Minimum along an axis; gradient routes one-hot to the argmin.

    Ties break to the lowest index (numpy argmin's first occurrence).
    """
    if not -t.values.ndim <= axis < t.values.ndim:
        raise ShapeError(f"min_over_axis: axis {axis} out of range for shape {t.shape}")
    if t.shape[axis] == 0:
        raise ShapeError("min_over_axis: reduced axis is empty")
    idx = np.argmin(t.values, axis=axis)
    out = np.take_along_axis(t.values, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    # Kink margin: gap between the two smallest entries along the axis.
    if t.shape[axis] > 1:
        part = np.partition(t.values, 1, axis=axis)
        gap = np.take(part, 1, axis=axis) - np.take(part, 0, axis=axis)
        margin = _min_or_inf(gap)
    else:
        margin = np.inf
    shp = t.shape

    def bwd(g, acc):
        out_g = np.zeros(shp)
        np.put_along_axis(out_g, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        acc(t, out_g)

    return Tensor._node(out, "min_over_axis", (t,), bwd, kink=margin)


# ---------------------------------------------------------------------------
# shape ops

def concat(parts, axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: no inputs")
    nd = parts[0].values.ndim
    for p in parts[1:]:
        if p.values.ndim != nd:
            raise ShapeError("concat: inputs have different ranks")
        for ax in range(nd):
            if ax != axis % nd and p.shape[ax] != parts[0].shape[ax]:
                raise ShapeError(
                    f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, acc):
        for p, piece in zip(parts, np.split(g, splits, axis=axis)):
            acc(p, piece)

    return Tensor._node(np.concatenate([p.values for p in parts], axis=axis),
                        "concat", parts, bwd)


def slice_axis(t: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start, stop) along one axis."""
    nd = t.values.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"slice: axis {axis} out of range for shape {t.shape}")
    axis = axis % nd
    dim = t.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ShapeError(f"slice: bounds [{start}, {stop}) invalid for axis of size {dim}")
    key = tuple(slice(start, stop) if ax == axis else slice(None) for ax in range(nd))
    shp = t.shape

    def bwd(g, acc):
        out_g = np.zeros(shp)
        out_g[key] = g
        acc(t, out_g)

    return Tensor._node(t.values[key], "slice", (t,), bwd)


def reshape(t: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != t.size:
        raise ShapeError(f"reshape: cannot reshape {t.shape} to {new_shape}")
    shp = t.shape

    def bwd(g, acc):
        acc(t, g.reshape(shp))

    return Tensor._node(t.values.reshape(new_shape), "reshape", (t,), bwd)


# ---------------------------------------------------------------------------
# backward driver

def _topo_order(root: Tensor):
    """Nodes requiring grad, inputs before consumers."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.inputs:
            if p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict:
    """Accumulate adjoints from a scalar root.

    Returns
    -------
    dict mapping each graph tensor with ``requires_grad`` to its gradient
    ndarray (same shape as the tensor). Constants are absent.
    """
    if root.values.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads = {id(root): np.ones(root.shape)}
    by_id = {id(root): root}

    def acc(t, g):
        if not t.requires_grad:
            return
        if g.shape != t.shape:
            raise ShapeError(f"{t.op}: adjoint shape {g.shape} != tensor shape {t.shape}")
        if id(t) in grads:
            grads[id(t)] = grads[id(t)] + g
        else:
            grads[id(t)] = np.asarray(g, dtype=np.float64)
            by_id[id(t)] = t

    for node in reversed(_topo_order(root)):
        if node._bwd is not None and id(node) in grads:
            node._bwd(grads[id(node)], acc)
    return {by_id[i]: g for i, g in grads.items()}


def kink_margin(root: Tensor) -> float:
    """Smallest distance of any graph node to a gradient kink (inf if none)."""
    margin = np.inf
    for node in _topo_order(root):
        if node._kink is not None:
            margin = min(margin, node._kink)
    return margin


def _min_or_inf(arr) -> float:
    return float(np.min(arr)) if np.size(arr) else np.inf


# ---------------------------------------------------------------------------
# finite-difference checking

@dataclass
class GradCheckResult:
    """Outcome of a finite-difference gradient check."""

    passed: bool
    max_rel_err: float
    jittered: bool          # evaluation point was moved off a kink
    kink_margin: float      # margin at the final evaluation point
    analytic: np.ndarray
    numeric: np.ndarray


def gradient_check(fn, x0, h: float = 1e-5, tol: float = 1e-4,
                   seed: int = 0, max_retries: int = 3) -> GradCheckResult:
    """Compare the backward gradient of ``fn`` against central differences.

    ``fn`` maps a Tensor to a scalar Tensor. If the graph evaluates within
    ``10 * h`` of a kink (relu/clip/min/sqrt), the point is jittered with a
    seeded draw and re-checked up to ``max_retries`` times before proceeding.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-3)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    rng = np.random.default_rng(seed)
    point = x0.copy()
    jittered = False
    margin = np.inf
    for _ in range(max_retries + 1):
        leaf = Tensor(point, requires_grad=True)
        out = fn(leaf)
        margin = kink_margin(out)
        if margin >= 10.0 * h:
            break
        point = x0 + rng.uniform(-10.0 * h, 10.0 * h, size=x0.shape)
        jittered = True
    else:
        leaf = Tensor(point, requires_grad=True)
        out = fn(leaf)
        margin = kink_margin(out)

    analytic = backward(out).get(leaf, np.zeros_like(point))
    numeric = np.zeros_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = _eval_scalar(fn, point)
        flat[i] = orig - h
        lo = _eval_scalar(fn, point)
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckResult(passed=max_rel < tol, max_rel_err=max_rel,
                           jittered=jittered, kink_margin=margin,
                           analytic=analytic, numeric=numeric)


def _eval_scalar(fn, point) -> float:
    out = fn(Tensor(np.array(point)))
    if out.values.size != 1:
        raise ShapeError("gradient_check: fn must return a scalar tensor")
    return float(out.values.reshape(()))
