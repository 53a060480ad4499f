"""Dense float64 tensors with reverse-mode automatic differentiation.

The primitive set is deliberately small: exactly what a small Transformer
and the surrogate losses need (matmul, add/mul, relu, log, row softmax,
layer norm, embedding gather, concat, masked fill, reshape/transpose,
entry gather, sum, dropout). Broadcasting is the numpy kind but is only
exercised for bias rows and batched matmul.

All math is float64; speed is not a goal at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Backward invoked on something that is not a recorded scalar."""


class Tensor:
    """A dense array plus an optional gradient slot.

    Tensors are immutable after forward creation except for ``grad``.
    Operations record their parents and a backward closure, forming an
    implicit compute graph that ``backward`` walks in reverse topological
    order, visiting each node exactly once. Gradients accumulate
    additively across uses of the same tensor.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self.grad = None
        self._parents = tuple(_parents)
        self._backward_fn = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``grad`` of every reachable requires_grad tensor."""
        if self.data.size != 1:
            raise GraphError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    out_data = a.data @ b.data

    def backward(g):
        a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward=backward)


def relu(x):
    x = as_tensor(x)
    # subgradient at exactly 0 is 0
    mask = x.data > 0.0
    out_data = np.where(mask, x.data, 0.0)

    def backward(g):
        x._accumulate(g * mask)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def log(x):
    x = as_tensor(x)
    out_data = np.log(x.data)

    def backward(g):
        x._accumulate(g / x.data)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def softmax_rows(x):
    """Softmax along the last axis with max-subtraction for stability."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        x._accumulate(out_data * (g - inner))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = gain.data * xhat + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gain._accumulate(_unbroadcast((g * xhat).sum(axis=lead), gain.data.shape))
        bias._accumulate(_unbroadcast(g.sum(axis=lead), bias.data.shape))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        x._accumulate(inv_std * (dxhat - m1 - xhat * m2))

    return Tensor(out_data, _parents=(x, gain, bias), _backward=backward)


def embedding(weight, ids):
    """Gather rows of ``weight`` by an integer index array."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = weight.data[ids]

    def backward(g):
        if not weight.requires_grad:
            return
        dw = np.zeros_like(weight.data)
        np.add.at(dw, ids.reshape(-1), g.reshape(-1, weight.data.shape[-1]))
        weight._accumulate(dw)

    return Tensor(out_data, _parents=(weight,), _backward=backward)


def reshape(x, shape):
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.data.shape))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def transpose(x, axes):
    x = as_tensor(x)
    out_data = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(np.transpose(g, inv))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return Tensor(out_data, _parents=tuple(tensors), _backward=backward)


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is true with a constant."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    out_data = np.where(mask, float(value), x.data)

    def backward(g):
        x._accumulate(np.where(mask, 0.0, g))

    return Tensor(out_data, _parents=(x,), _backward=backward)


def take(x, indices):
    """Gather entries by a tuple of integer index arrays (fancy indexing)."""
    x = as_tensor(x)
    indices = tuple(np.asarray(i, dtype=np.int64) for i in indices)
    out_data = x.data[indices]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, indices, g)
        x._accumulate(dx)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def slice_axis(x, axis, start, stop):
    """Contiguous slice along one axis."""
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out_data = x.data[index]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        x._accumulate(dx)

    return Tensor(out_data, _parents=(x,), _backward=backward)


def tsum(x, axis=None):
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())

    return Tensor(out_data, _parents=(x,), _backward=backward)


def mean(x):
    x = as_tensor(x)
    return mul(tsum(x), 1.0 / x.size)


def dropout(x, p, rng, training):
    """Inverted dropout with an explicit RNG stream; identity when not training."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return mul(x, keep)


@dataclass
class GradCheckEntry:
    param_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    worst: GradCheckEntry | None = None
    entries: list = field(default_factory=list, repr=False)


def _rel_error(a, n):
    denom = max(abs(a), abs(n))
    if denom < 1e-6:
        return abs(a - n)
    return abs(a - n) / denom


def grad_check(f, params, step=1e-5, tol=1e-5):
    """Compare analytic gradients of ``f()`` against central finite differences.

    ``f`` must be a deterministic scalar-valued function of the tensors in
    ``params``, re-recording its graph on every call. Returns a report whose
    ``passed`` flag is true iff the max relative error is within ``tol``.
    """
    params = list(params)
    first = f()
    second = f()
    if not isinstance(first, Tensor) or first.data.size != 1:
        raise GraphError("grad_check target must return a scalar Tensor")
    if first.item() != second.item():
        raise GraphError("grad_check target is non-deterministic")
    for p in params:
        p.zero_grad()
    second.backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]
    report = GradCheckReport(max_rel_error=0.0, tol=tol, passed=True)
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[pi].reshape(-1)[i])
            err = _rel_error(a, numeric)
            entry = GradCheckEntry(pi, i, a, numeric, err)
            report.entries.append(entry)
            if err >= report.max_rel_error:
                report.max_rel_error = err
                report.worst = entry
    report.passed = report.max_rel_error <= tol
    return report
