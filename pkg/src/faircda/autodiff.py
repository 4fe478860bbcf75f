"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation appends a node to an implicit DAG (nodes hold references to
their inputs, so insertion order is a topological order).  The twist that the
rest of the package relies on: a backward pass does not fill ``.grad``
buffers, it *builds new nodes* using the same primitives.  A gradient is
therefore an ordinary tensor in the graph and can feed further operations,
which is what makes a penalty built from gradients differentiable in its own
right with a second backward pass.

All values are float64.  Any operation that produces a NaN/Inf raises
``NonFiniteError`` at construction time, so a graph that exists is finite.
"""

from __future__ import annotations

import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

BCE_CLAMP = 1e-7


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class NonScalarError(AutodiffError):
    pass


class UnreachableGradientWarning(UserWarning):
    """Requested a gradient w.r.t. a node the scalar does not depend on."""


class Tensor:
    """A value in the graph: data plus links to the inputs that produced it.

    ``vjp`` maps (this node, upstream gradient node) to one gradient node per
    parent; the rules are themselves written with the public ops, which is
    what keeps gradients differentiable.
    """

    __slots__ = ("data", "parents", "op", "vjp")

    def __init__(self, data, parents=(), op="leaf", vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in output of op '{op}'")
        self.data = arr
        self.parents = tuple(parents)
        self.op = op
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # Light operator sugar; constants only on the right for * and +.
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        return divide(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(x) -> "Tensor":
    return x if isinstance(x, Tensor) else constant(x)


def constant(data) -> Tensor:
    """Leaf node; also used to detach an array from the graph."""
    return Tensor(data)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def _require(cond: bool, op: str, msg: str):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require(a.ndim == 2 and b.ndim == 2, "matmul", f"need 2-d operands, got {a.shape} @ {b.shape}")
    _require(a.shape[1] == b.shape[0], "matmul", f"inner dims differ: {a.shape} @ {b.shape}")

    def vjp(out, up):
        return matmul(up, transpose(b)), matmul(transpose(a), up)

    return Tensor(a.data @ b.data, (a, b), "matmul", vjp)


def transpose(x: Tensor) -> Tensor:
    _require(x.ndim == 2, "transpose", f"need 2-d, got {x.shape}")

    def vjp(out, up):
        return (transpose(up),)

    return Tensor(np.ascontiguousarray(x.data.T), (x,), "transpose", vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim:
        return add(b, a)
    if a.shape == b.shape:
        def vjp(out, up):
            return up, up
        return Tensor(a.data + b.data, (a, b), "add", vjp)
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        # row-broadcast bias
        def vjp(out, up):
            return up, sumrows(up)
        return Tensor(a.data + b.data, (a, b), "add", vjp)
    if b.ndim == 0:
        def vjp(out, up):
            return up, sum_all(up)
        return Tensor(a.data + b.data, (a, b), "add", vjp)
    raise ShapeError(f"add: incompatible shapes {a.shape} + {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def vjp(out, up):
            return up, scale(up, -1.0)
        return Tensor(a.data - b.data, (a, b), "sub", vjp)
    if b.ndim == 0:
        def vjp(out, up):
            return up, scale(sum_all(up), -1.0)
        return Tensor(a.data - b.data, (a, b), "sub", vjp)
    if a.ndim == 0:
        def vjp(out, up):
            return sum_all(up), scale(up, -1.0)
        return Tensor(a.data - b.data, (a, b), "sub", vjp)
    raise ShapeError(f"sub: incompatible shapes {a.shape} - {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def vjp(out, up):
            return mul(up, b), mul(up, a)
        return Tensor(a.data * b.data, (a, b), "mul", vjp)
    if b.ndim == 0:
        def vjp(out, up):
            return mul(up, b), sum_all(mul(up, a))
        return Tensor(a.data * b.data, (a, b), "mul", vjp)
    if a.ndim == 0:
        def vjp(out, up):
            return sum_all(mul(up, b)), mul(up, a)
        return Tensor(a.data * b.data, (a, b), "mul", vjp)
    raise ShapeError(f"mul: incompatible shapes {a.shape} * {b.shape}")


def divide(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        def vjp(out, up):
            return divide(up, b), scale(divide(mul(up, a), square(b)), -1.0)
        return Tensor(a.data / b.data, (a, b), "divide", vjp)
    if b.ndim == 0:
        def vjp(out, up):
            return divide(up, b), scale(sum_all(divide(mul(up, a), square(b))), -1.0)
        return Tensor(a.data / b.data, (a, b), "divide", vjp)
    if a.ndim == 0:
        def vjp(out, up):
            return sum_all(divide(up, b)), scale(divide(mul(up, a), square(b)), -1.0)
        return Tensor(a.data / b.data, (a, b), "divide", vjp)
    raise ShapeError(f"divide: incompatible shapes {a.shape} / {b.shape}")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(out, up):
        return (scale(up, c),)

    return Tensor(x.data * c, (x,), "scale", vjp)


def addc(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(out, up):
        return (up,)

    return Tensor(x.data + c, (x,), "addc", vjp)


def square(x: Tensor) -> Tensor:
    def vjp(out, up):
        return (mul(up, scale(x, 2.0)),)

    return Tensor(x.data * x.data, (x,), "square", vjp)


def sqrt(x: Tensor) -> Tensor:
    def vjp(out, up):
        return (divide(up, scale(out, 2.0)),)

    return Tensor(np.sqrt(x.data), (x,), "sqrt", vjp)


def log(x: Tensor) -> Tensor:
    def vjp(out, up):
        return (divide(up, x),)

    return Tensor(np.log(x.data), (x,), "log", vjp)


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0.0).astype(np.float64)

    def vjp(out, up):
        return (mul(up, constant(mask)),)

    return Tensor(kernels.relu(x.data), (x,), "relu", vjp)


def sigmoid(x: Tensor) -> Tensor:
    def vjp(out, up):
        return (mul(up, mul(out, addc(scale(out, -1.0), 1.0))),)

    return Tensor(kernels.sigmoid(x.data), (x,), "sigmoid", vjp)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def vjp(out, up):
        return (mul(up, constant(sign)),)

    return Tensor(np.abs(x.data), (x,), "abs", vjp)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    interior = ((x.data > lo) & (x.data < hi)).astype(np.float64)

    def vjp(out, up):
        return (mul(up, constant(interior)),)

    return Tensor(np.clip(x.data, lo, hi), (x,), "clip", vjp)


def concat(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    _require(len(parts) >= 1, "concat", "need at least one input")
    _require(all(p.ndim == 2 for p in parts), "concat", "need 2-d inputs")
    n = parts[0].shape[0]
    _require(all(p.shape[0] == n for p in parts), "concat", "row counts differ")
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(out, up):
        return tuple(slice_cols(up, offsets[i], offsets[i + 1]) for i in range(len(parts)))

    return Tensor(np.concatenate([p.data for p in parts], axis=1), parts, "concat", vjp)


def slice_cols(x: Tensor, j0: int, j1: int) -> Tensor:
    _require(x.ndim == 2, "slice_cols", f"need 2-d, got {x.shape}")
    _require(0 <= j0 <= j1 <= x.shape[1], "slice_cols", f"range [{j0},{j1}) out of {x.shape}")
    total = x.shape[1]

    def vjp(out, up):
        return (pad_cols(up, j0, total),)

    return Tensor(np.ascontiguousarray(x.data[:, j0:j1]), (x,), "slice_cols", vjp)


def pad_cols(x: Tensor, j0: int, total: int) -> Tensor:
    _require(x.ndim == 2, "pad_cols", f"need 2-d, got {x.shape}")
    w = x.shape[1]
    _require(j0 + w <= total, "pad_cols", "columns exceed target width")
    out = np.zeros((x.shape[0], total))
    out[:, j0:j0 + w] = x.data

    def vjp(o, up):
        return (slice_cols(up, j0, j0 + w),)

    return Tensor(out, (x,), "pad_cols", vjp)


def sumrows(x: Tensor) -> Tensor:
    _require(x.ndim == 2, "sumrows", f"need 2-d, got {x.shape}")
    n = x.shape[0]

    def vjp(out, up):
        return (tile_rows(up, n),)

    return Tensor(x.data.sum(axis=0), (x,), "sumrows", vjp)


def tile_rows(x: Tensor, n: int) -> Tensor:
    _require(x.ndim == 1, "tile_rows", f"need 1-d, got {x.shape}")

    def vjp(out, up):
        return (sumrows(up),)

    return Tensor(np.repeat(x.data[None, :], n, axis=0), (x,), "tile_rows", vjp)


def sumcols(x: Tensor) -> Tensor:
    _require(x.ndim == 2, "sumcols", f"need 2-d, got {x.shape}")
    m = x.shape[1]

    def vjp(out, up):
        return (tile_cols(up, m),)

    return Tensor(x.data.sum(axis=1, keepdims=True), (x,), "sumcols", vjp)


def tile_cols(x: Tensor, m: int) -> Tensor:
    _require(x.ndim == 2 and x.shape[1] == 1, "tile_cols", f"need [n,1], got {x.shape}")

    def vjp(out, up):
        return (sumcols(up),)

    return Tensor(np.repeat(x.data, m, axis=1), (x,), "tile_cols", vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def vjp(out, up):
        return (tile_full(up, shape),)

    return Tensor(np.asarray(x.data.sum()), (x,), "sum_all", vjp)


def tile_full(x: Tensor, shape) -> Tensor:
    _require(x.ndim == 0, "tile_full", f"need scalar, got {x.shape}")

    def vjp(out, up):
        return (sum_all(up),)

    return Tensor(np.full(shape, float(x.data)), (x,), "tile_full", vjp)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def dot(a: Tensor, b: Tensor) -> Tensor:
    _require(a.shape == b.shape, "dot", f"shapes differ: {a.shape} vs {b.shape}")
    return sum_all(mul(a, b))


def rowdot(a: Tensor, b: Tensor) -> Tensor:
    _require(a.ndim == 2 and a.shape == b.shape, "rowdot", f"shapes differ: {a.shape} vs {b.shape}")
    return sumcols(mul(a, b))


def l2norm(x: Tensor) -> Tensor:
    return sqrt(sum_all(square(x)))


def bce(pred: Tensor, target: Tensor) -> Tensor:
    """Elementwise binary cross-entropy with clamped probabilities.

    Predictions are clamped to [BCE_CLAMP, 1-BCE_CLAMP] before the logs, so
    the loss is defined at the endpoints.  Targets may be soft (in [0,1]).
    """
    _require(pred.shape == target.shape, "bce", f"shapes differ: {pred.shape} vs {target.shape}")
    p = clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    one_minus_t = addc(scale(target, -1.0), 1.0)
    one_minus_p = addc(scale(p, -1.0), 1.0)
    ll = add(mul(target, log(p)), mul(one_minus_t, log(one_minus_p)))
    return scale(ll, -1.0)


_FORWARD_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "relu": relu,
    "sigmoid": sigmoid,
    "concat": lambda *parts: concat(parts),
    "dot": dot,
    "l2norm": l2norm,
    "scale": scale,
    "sub": sub,
    "square": square,
    "divide": divide,
    "bce": bce,
}


def forward_op(kind: str, inputs: Iterable[Tensor], **params) -> Tensor:
    """Uniform entry point over the primitive set, for callers that dispatch
    on op names rather than calling the functions directly."""
    if kind not in _FORWARD_OPS:
        raise ValueError(f"unknown op kind '{kind}'")
    return _FORWARD_OPS[kind](*inputs, **params)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    # iterative post-order: inputs appear before every node that uses them
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if id(p) not in visited:
                stack.append((p, False))
    return order


class GradientMap:
    """Gradients of one scalar node, keyed by node identity.

    Gradients are graph nodes themselves.  Nodes the scalar does not depend
    on map to zero tensors and report ``reached() == False``.
    """

    def __init__(self, grads: dict[int, Tensor], nodes: dict[int, Tensor], root: Tensor):
        self._grads = grads
        self._nodes = nodes  # keeps keyed nodes alive
        self.root = root

    def reached(self, node: Tensor) -> bool:
        return id(node) in self._grads

    def wrt(self, node: Tensor) -> Tensor:
        g = self._grads.get(id(node))
        if g is None:
            return zeros_like(node)
        return g

    def __len__(self):
        return len(self._grads)


def backward(root: Tensor, targets: Sequence[Tensor] | None = None) -> GradientMap:
    """Reverse-mode pass from a scalar; returns gradients as graph nodes.

    With ``targets`` given, gradient propagation is pruned to the sub-graph
    between the root and those nodes (params and everything else outside it
    are skipped), which is how intermediate-feature gradients are extracted
    cheaply inside a larger objective.
    """
    if root.size != 1:
        raise NonScalarError(f"backward root must be scalar, got shape {root.shape}")

    order = _toposort(root)

    needed: set[int] | None = None
    if targets is not None:
        target_ids = {id(t) for t in targets}
        needed = set()
        for node in order:  # inputs precede consumers
            if id(node) in target_ids or any(id(p) in needed for p in node.parents):
                needed.add(id(node))

    grads: dict[int, Tensor] = {id(root): constant(np.ones_like(root.data))}
    nodes: dict[int, Tensor] = {id(root): root}
    for node in reversed(order):
        up = grads.get(id(node))
        if up is None or node.vjp is None:
            continue
        pieces = node.vjp(node, up)
        for parent, piece in zip(node.parents, pieces):
            if piece is None:
                continue
            if needed is not None and id(parent) not in needed:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = piece if prev is None else add(prev, piece)
            nodes[id(parent)] = parent
    return GradientMap(grads, nodes, root)


def grad_wrt(scalar: Tensor, target: Tensor) -> Tensor:
    """Gradient of a scalar w.r.t. any node, itself differentiable.

    If the scalar does not depend on the target the result is a zero tensor
    and an ``UnreachableGradientWarning`` is emitted.
    """
    gm = backward(scalar, targets=(target,))
    if not gm.reached(target):
        warnings.warn(
            f"target node {target!r} is not an ancestor of the scalar; returning zeros",
            UnreachableGradientWarning,
            stacklevel=2,
        )
    return gm.wrt(target)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Sequence[Tensor]], Tensor],
                      params: Sequence[Tensor],
                      eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients of a scalar function over leaf tensors.

    ``f`` is re-evaluated with perturbed leaf data, so it must rebuild its
    graph from ``params`` on every call.  Leaf data is restored afterwards.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")

    out = f(params)
    if out.size != 1:
        raise NonScalarError("finite_diff_check target must be scalar")
    gm = backward(out)
    auto = [gm.wrt(p).data.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, auto):
        orig = p.data.copy()
        num = np.zeros_like(orig)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_hi = float(f(params).data.reshape(()))
            flat[i] = saved - eps
            f_lo = float(f(params).data.reshape(()))
            flat[i] = saved
            num.reshape(-1)[i] = (f_hi - f_lo) / (2.0 * eps)
        p.data = orig
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        err = float(np.max(np.abs(a - num) / denom)) if a.size else 0.0
        worst = max(worst, err)
    return worst
