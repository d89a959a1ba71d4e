"""Reverse-mode automatic differentiation over float64 numpy buffers.

Deliberately small: single process, CPU only, 64-bit floats everywhere.
Each operation checks its output for NaN/Inf (a NumericsError, not a silent
propagation), records the parent tensors and a vector-Jacobian closure, and
`backward()` walks the graph once in reverse topological order, accumulating
gradients into every tensor that requires them. The graph is freed after the
walk; calling backward twice on the same graph is an error.
"""
from __future__ import annotations

import numpy as np

from ..errors import NumericsError, ShapeError

__all__ = [
    "DiffTensor", "constant", "tensor", "backward",
    "add", "sub", "mul", "neg", "scale", "matmul", "transpose",
    "reshape", "broadcast_to", "concat", "slice_axis", "gather_rows", "scatter_rows",
    "relu", "sigmoid", "log", "sqrt", "sum", "mean", "max_pool",
    "softmax", "dropout", "layer_norm", "smooth_l1",
]

# Sentinel marking a graph that has already been consumed by backward().
_FREED = object()


class _Node:
    __slots__ = ("inputs", "vjp")

    def __init__(self, inputs, vjp):
        self.inputs = inputs
        self.vjp = vjp


class DiffTensor:
    """A float64 array that can participate in reverse-mode differentiation.

    Attributes:
        values: row-major float64 buffer.
        grad: same-shape gradient buffer, materialized lazily by backward().
        node: backward record for non-leaf tensors (None for leaves).
        requires_grad: whether gradients should flow to/through this tensor.
    """

    __slots__ = ("values", "grad", "node", "requires_grad")

    def __init__(self, values, requires_grad=False, node=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.node = node
        self.requires_grad = bool(requires_grad) or node is not None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    @property
    def ndim(self):
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions are the real API.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def constant(values) -> DiffTensor:
    """Wrap an array as a non-differentiable tensor."""
    return DiffTensor(values, requires_grad=False)


def tensor(values, requires_grad=True) -> DiffTensor:
    """Wrap an array as a differentiable leaf."""
    return DiffTensor(values, requires_grad=requires_grad)


def _wrap(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return constant(x)


def _make(values, inputs, vjp) -> DiffTensor:
    """Build an op result, checking finiteness and recording the graph."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericsError("non-finite values produced in forward pass")
    if any(t.requires_grad for t in inputs):
        return DiffTensor(values, node=_Node(inputs, vjp))
    return DiffTensor(values)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = g.sum(axis=squeeze, keepdims=True)
    return g.reshape(shape)


def backward(root: DiffTensor) -> None:
    """Populate gradients of every tensor reachable from `root`.

    `root` must be a scalar (size 1). The graph is freed afterwards; a second
    backward on the same graph raises.
    """
    if root.node is _FREED:
        raise RuntimeError("backward already ran on this graph; re-run the forward pass")
    if root.size != 1:
        raise ShapeError(f"backward requires a scalar, got shape {root.shape}")

    # Iterative topological sort (graphs can be deep at training batch sizes).
    topo: list[DiffTensor] = []
    seen: dict[int, DiffTensor] = {}
    stack: list[tuple[DiffTensor, bool]] = [(root, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            topo.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        if t.node is _FREED:
            raise RuntimeError("graph partially consumed by an earlier backward; re-run the forward pass")
        seen[id(t)] = t
        stack.append((t, True))
        for parent in t.node.inputs:
            if parent.requires_grad:
                stack.append((parent, False))

    root.grad = np.ones_like(root.values)
    for t in reversed(topo):
        g = t.grad
        if g is None:
            continue
        grads = t.node.vjp(g)
        for parent, pg in zip(t.node.inputs, grads):
            if pg is None or not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
    for t in topo:
        t.node = _FREED


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    na, nb = a.requires_grad, b.requires_grad
    return _make(
        a.values + b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape) if na else None,
                   _unbroadcast(g, b.shape) if nb else None),
    )


def sub(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    na, nb = a.requires_grad, b.requires_grad
    return _make(
        a.values - b.values, (a, b),
        lambda g: (_unbroadcast(g, a.shape) if na else None,
                   _unbroadcast(-g, b.shape) if nb else None),
    )


def mul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.values, b.values
    na, nb = a.requires_grad, b.requires_grad
    return _make(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape) if na else None,
                   _unbroadcast(g * av, b.shape) if nb else None),
    )


def neg(a: DiffTensor) -> DiffTensor:
    return _make(-a.values, (a,), lambda g: (-g,))


def scale(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)
    return _make(a.values * c, (a,), lambda g: (g * c,))


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    na, nb = a.requires_grad, b.requires_grad
    return _make(
        av @ bv, (a, b),
        lambda g: (g @ bv.T if na else None, av.T @ g if nb else None),
    )


def transpose(a: DiffTensor) -> DiffTensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-d tensor, got {a.shape}")
    return _make(a.values.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: DiffTensor, shape) -> DiffTensor:
    old = a.shape
    return _make(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def broadcast_to(a: DiffTensor, shape) -> DiffTensor:
    old = a.shape
    return _make(
        np.broadcast_to(a.values, shape).copy(), (a,),
        lambda g: (_unbroadcast(g, old),),
    )


def concat(tensors, axis: int) -> DiffTensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    split_points = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, split_points, axis=axis))

    return _make(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), vjp)


def slice_axis(a: DiffTensor, axis: int, start: int, length: int) -> DiffTensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def vjp(g):
        out = np.zeros(a.shape)
        out[index] = g
        return (out,)

    return _make(a.values[index].copy(), (a,), vjp)


def gather_rows(a: DiffTensor, indices) -> DiffTensor:
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        out = np.zeros(a.shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.values[idx].copy(), (a,), vjp)


def scatter_rows(a: DiffTensor, indices, n_rows: int) -> DiffTensor:
    """Place rows of `a` at `indices` (unique) in a zero tensor of n_rows rows."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size != a.shape[0]:
        raise ShapeError(f"scatter_rows got {idx.size} indices for {a.shape[0]} rows")
    out = np.zeros((n_rows,) + a.shape[1:])
    out[idx] = a.values
    return _make(out, (a,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# nonlinearities and reductions
# ---------------------------------------------------------------------------

def relu(a: DiffTensor) -> DiffTensor:
    gate = a.values > 0
    return _make(np.maximum(a.values, 0.0), (a,), lambda g: (g * gate,))


def sigmoid(a: DiffTensor) -> DiffTensor:
    # Branch on sign to avoid exp overflow for large negative inputs.
    v = a.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a: DiffTensor, floor: float = 1e-12) -> DiffTensor:
    """Natural log with the argument clamped below at `floor`."""
    clamped = np.maximum(a.values, floor)
    gate = a.values > floor
    return _make(np.log(clamped), (a,), lambda g: (np.where(gate, g / clamped, 0.0),))


def sqrt(a: DiffTensor, eps: float = 0.0) -> DiffTensor:
    """sqrt(x + eps); a tiny eps keeps the derivative finite at x == 0."""
    root = np.sqrt(a.values + eps)
    return _make(root, (a,), lambda g: (g * 0.5 / root,))


def sum(a: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:  # noqa: A001
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _make(a.values.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    if axis is None:
        count = a.size
    else:
        count = a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max_pool(a: DiffTensor, axis: int) -> DiffTensor:
    """Max-reduce along `axis`; gradient routes to the first max on ties."""
    idx = np.argmax(a.values, axis=axis)

    def vjp(g):
        out = np.zeros(a.shape)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _make(np.max(a.values, axis=axis), (a,), vjp)


# ---------------------------------------------------------------------------
# softmax / dropout / layer norm / smooth-l1
# ---------------------------------------------------------------------------

def softmax(a: DiffTensor, axis: int = -1, mask=None) -> DiffTensor:
    """Masked softmax. `mask` marks INVALID positions (True = excluded).

    Invalid positions get exactly 0 probability; rows with no valid position
    come out all-zero instead of raising.
    """
    v = np.moveaxis(a.values, axis, -1)
    if mask is None:
        valid = np.ones(v.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape == a.shape:
            m = np.moveaxis(m, axis, -1)
        # otherwise the mask must broadcast against the softmax axis (last)
        valid = ~np.broadcast_to(m, v.shape)
    shifted = np.where(valid, v, -np.inf)
    rowmax = shifted.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(np.where(valid, v - rowmax, -np.inf))
    denom = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    p = np.moveaxis(p, -1, axis)

    def vjp(g):
        gm = np.moveaxis(g, axis, -1)
        pm = np.moveaxis(p, axis, -1)
        dot = (gm * pm).sum(axis=-1, keepdims=True)
        gx = pm * (gm - dot)
        return (np.moveaxis(gx, -1, axis),)

    return _make(p, (a,), vjp)


def dropout(a: DiffTensor, rate: float, training: bool, rng=None) -> DiffTensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.values * keep, (a,), lambda g: (g * keep,))


def layer_norm(a: DiffTensor, gain: DiffTensor, bias: DiffTensor, eps: float = 1e-5) -> DiffTensor:
    """Normalize over the last axis, then scale and shift."""
    v = a.values
    mu = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    gv, bv = gain.values, bias.values

    def vjp(g):
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        gh = g * gv
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx, ggain, gbias)

    return _make(xhat * gv + bv, (a, gain, bias), vjp)


def smooth_l1(pred: DiffTensor, target: DiffTensor) -> DiffTensor:
    """Huber-style loss, averaged over all elements.

    Per element: 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise, with d = pred - target.
    """
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    d = pred.values - target.values
    a = np.abs(d)
    quad = a < 1.0
    perelem = np.where(quad, 0.5 * d * d, a - 0.5)
    n = d.size

    def vjp(g):
        gd = np.where(quad, d, np.sign(d)) * (g / n)
        return (gd, -gd)

    return _make(perelem.mean(), (pred, target), vjp)
