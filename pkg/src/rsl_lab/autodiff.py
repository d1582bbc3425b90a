"""Minimal reverse-mode automatic differentiation over float64 arrays.

Values are stored as C-contiguous (row-major) ``numpy.float64`` arrays, so the
flat index of element ``(i0, ..., in)`` is the usual row-major offset.  This is
the layout used by checkpoint files.

Usage::

    w = parameter(np.ones((3, 2)))
    with Tape() as tape:
        loss = sum_(matmul(x, w))
    grads = backward(tape, loss)   # {w.id: dloss/dw}

Outside of an active tape operations only compute forward values, which is
how decoding runs.
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5

PRIMITIVES = frozenset({
    "matmul", "add", "mul", "neg", "concat", "slice", "transpose",
    "embedding_gather", "tanh", "sigmoid", "relu", "glu", "layer_norm",
    "softmax", "log_softmax", "sum", "mean", "scale",
})

_ids = itertools.count()
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not satisfy a primitive's shape rule."""


class BackwardError(RuntimeError):
    """Backward called on something other than a scalar root."""


class Node:
    __slots__ = ("id", "value", "parents", "primitive", "grad", "requires_grad", "_backward")

    def __init__(self, value, parents=(), primitive="leaf", requires_grad=False, backward_fn=None):
        self.id = next(_ids)
        self.value = value
        self.parents = parents
        self.primitive = primitive
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, primitive={self.primitive}, shape={self.value.shape})"


class Tape:
    """Append-only record of the nodes produced while it is active."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev = None

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False


def current_tape() -> Tape | None:
    return getattr(_local, "tape", None)


class no_grad:
    """Suspend recording on the current thread."""

    def __enter__(self):
        self._prev = getattr(_local, "tape", None)
        _local.tape = None

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False


def parameter(value) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def _emit(value, parents, primitive, backward_fn) -> Node:
    tape = getattr(_local, "tape", None)
    if tape is None or not any(p.requires_grad for p in parents):
        return Node(value, primitive=primitive)
    node = Node(value, tuple(parents), primitive, True, backward_fn)
    tape.nodes.append(node)
    return node


def _shape_error(tag, a, b):
    return ShapeError(f"{tag}: incompatible shapes {tuple(a)} and {tuple(b)}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Node, b: Node) -> Node:
    """``a (..., m, k) @ b`` with ``b`` either ``(k, n)`` or ``(..., k, n)``."""
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise _shape_error("matmul", av.shape, bv.shape)
    if bv.ndim > 2 and bv.shape[:-2] != av.shape[:-2]:
        raise _shape_error("matmul", av.shape, bv.shape)
    out = av @ bv

    def bwd(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _emit(out, (a, b), "matmul", bwd)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may also be a bias over the last axis of ``a``."""
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        return _emit(av + bv, (a, b), "add", lambda g: (g, g))
    if bv.ndim == 1 and av.ndim >= 1 and av.shape[-1] == bv.shape[0]:
        return _emit(av + bv, (a, b), "add",
                     lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)))
    raise _shape_error("add", av.shape, bv.shape)


def mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise _shape_error("mul", av.shape, bv.shape)
    return _emit(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def neg(a: Node) -> Node:
    return _emit(-a.value, (a,), "neg", lambda g: (-g,))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _emit(a.value * c, (a,), "scale", lambda g: (g * c,))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    vals = [n.value for n in nodes]
    ndim = vals[0].ndim
    ax = axis % ndim
    for v in vals[1:]:
        if v.ndim != ndim or v.shape[:ax] + v.shape[ax + 1:] != vals[0].shape[:ax] + vals[0].shape[ax + 1:]:
            raise _shape_error("concat", vals[0].shape, v.shape)
    out = np.concatenate(vals, axis=ax)
    bounds = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit(out, tuple(nodes), "concat", bwd)


def slice_(a: Node, index) -> Node:
    """Basic (view) indexing with slices and integers; no fancy indexing."""
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (slice, int, type(Ellipsis))):
            raise ShapeError(f"slice: unsupported index component {i!r}")
    try:
        out = a.value[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index} invalid for shape {a.value.shape}") from exc
    shape = a.value.shape

    def bwd(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit(np.array(out, order="C"), (a,), "slice", bwd)


def transpose(a: Node, axes: Sequence[int] | None = None) -> Node:
    if axes is None:
        if a.value.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 dims, got {a.value.shape}")
        axes = list(range(a.value.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.value.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.value.shape}")
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.value, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def embedding_gather(table: Node, ids) -> Node:
    """Rows of ``table (V, D)`` selected by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    tv = table.value
    if tv.ndim != 2:
        raise ShapeError(f"embedding_gather: table must be 2-D, got {tv.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise ShapeError(f"embedding_gather: ids out of range for table {tv.shape}")
    out = tv[ids]

    def bwd(g):
        flat = ids.reshape(-1)
        onehot = np.zeros((flat.size, tv.shape[0]))
        onehot[np.arange(flat.size), flat] = 1.0
        return (onehot.T @ g.reshape(-1, tv.shape[1]),)

    return _emit(out, (table,), "embedding_gather", bwd)


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _emit(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a: Node) -> Node:
    out = _sigmoid(a.value)
    return _emit(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(a: Node) -> Node:
    pos = a.value > 0
    return _emit(np.where(pos, a.value, 0.0), (a,), "relu", lambda g: (g * pos,))


def glu(a: Node) -> Node:
    """Gated linear unit: split the last axis into ``x || gate``; ``x * sigmoid(gate)``."""
    av = a.value
    if av.shape[-1] % 2:
        raise ShapeError(f"glu: last axis must be even, got {av.shape}")
    h = av.shape[-1] // 2
    x, gate = av[..., :h], av[..., h:]
    s = _sigmoid(gate)

    def bwd(g):
        return (np.concatenate([g * s, g * x * s * (1.0 - s)], axis=-1),)

    return _emit(x * s, (a,), "glu", bwd)


def layer_norm(x: Node, gain: Node, bias: Node) -> Node:
    """Normalize over the last axis, then ``* gain + bias`` (both shape ``(D,)``)."""
    xv, gv, bv = x.value, gain.value, bias.value
    d = xv.shape[-1]
    if gv.shape != (d,) or bv.shape != (d,):
        raise _shape_error("layer_norm", xv.shape, gv.shape)
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    out = xhat * gv + bv

    def bwd(g):
        g2 = g.reshape(-1, d)
        ggain = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        gbias = g2.sum(axis=0)
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), "layer_norm", bwd)


def _log_softmax(z):
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(a: Node) -> Node:
    out = np.exp(_log_softmax(a.value))

    def bwd(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (a,), "softmax", bwd)


def log_softmax(a: Node) -> Node:
    out = _log_softmax(a.value)

    def bwd(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit(out, (a,), "log_softmax", bwd)


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.value.shape
    out = np.asarray(a.value.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(out, (a,), "sum", bwd)


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.value.shape
    out = np.asarray(a.value.mean(axis=axis, keepdims=keepdims), dtype=np.float64)
    count = a.value.size // max(out.size, 1)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit(out, (a,), "mean", bwd)


_DISPATCH: dict[str, Callable] = {
    "matmul": matmul, "add": add, "mul": mul, "neg": neg, "scale": scale,
    "concat": lambda *xs, axis=-1: concat(xs, axis), "slice": slice_,
    "transpose": transpose, "embedding_gather": embedding_gather, "tanh": tanh,
    "sigmoid": sigmoid, "relu": relu, "glu": glu, "layer_norm": layer_norm,
    "softmax": softmax, "log_softmax": log_softmax, "sum": sum_, "mean": mean,
}


def apply_primitive(tag: str, inputs: Sequence[Node], **attrs) -> Node:
    """Apply a primitive by name, e.g. ``apply_primitive("scale", [x], c=2.0)``."""
    if tag not in PRIMITIVES:
        raise ValueError(f"unknown primitive {tag!r}")
    return _DISPATCH[tag](*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward


def backward(tape: Tape, root: Node) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``root``; returns ``{leaf id: gradient}``.

    Every trainable leaf referenced by the tape gets an entry (zeros when the
    root does not depend on it).  ``node.grad`` is filled for tape nodes and
    leaves alike.
    """
    if root.value.size != 1 or root.value.ndim > 1:
        raise BackwardError(f"backward needs a scalar root, got shape {root.value.shape}")
    leaves: dict[int, Node] = {}
    for node in tape.nodes:
        node.grad = None
        for p in node.parents:
            if p._backward is None and p.requires_grad:
                leaves[p.id] = p
    for leaf in leaves.values():
        leaf.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        for p, gp in zip(node.parents, node._backward(g)):
            if not p.requires_grad:
                continue
            # out-of-place: backward fns may hand the same array to several parents
            p.grad = gp if p.grad is None else p.grad + gp
    for node in tape.nodes:
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
    out = {}
    for leaf in leaves.values():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.value)
        out[leaf.id] = leaf.grad
    return out


def value_and_grad(f: Callable[[Node], Node], x: np.ndarray) -> tuple[float, np.ndarray]:
    leaf = parameter(x)
    with Tape() as tape:
        out = f(leaf)
    grads = backward(tape, out)
    return float(out.value.reshape(())), grads.get(leaf.id, np.zeros_like(leaf.value))


def finite_diff_check(f: Callable[[Node], Node], params: np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.

    ``f`` maps a parameter node to a scalar node; the finite-difference side
    evaluates it on plain constants with central differences.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    params = np.array(params, dtype=np.float64)
    _, g_ad = value_and_grad(f, params)
    g_fd = np.zeros_like(params)
    flat = params.reshape(-1)
    gflat = g_fd.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(constant(params.copy())).value.reshape(()))
            flat[i] = orig - h
            fm = float(f(constant(params.copy())).value.reshape(()))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
            gflat[i] = (fp - fm) / (2 * h)
    if params.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom))
