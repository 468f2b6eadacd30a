"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient. ``Tape.backward`` replays the record in reverse and
accumulates into the ``grad`` buffers of the leaf tensors.

    >>> w = Tensor(np.ones((2, 2)), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(matmul(w, w))
    ...     tape.backward(loss)
    >>> w.grad
    array([[4., 4.],
           [4., 4.]])
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from mae import kernels

DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, shape):
        super().__init__(f"{op} produced non-finite values (shape {tuple(shape)})")
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_from_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        if self.data.size == 0:
            raise DimensionError(f"empty tensor of shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NonFiniteError(name or "Tensor", self.data.shape)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._from_op = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


# --------------------------------------------------------------------------
# tape

_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional["Tape"]:
    tapes = _stack()
    return tapes[-1] if tapes else None


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out = out
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; nested tapes shadow outer ones. A tape is bound
    to the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable, op: str):
        self.nodes.append(_Node(out, tuple(inputs), backward, op))

    def clear(self):
        self.nodes.clear()

    def backward(self, loss: Tensor, grad: Optional[np.ndarray] = None):
        """Accumulate d(loss)/d(leaf) into every leaf with ``requires_grad``."""
        if grad is None:
            if loss.size != 1:
                raise DimensionError(f"backward needs a scalar or explicit grad, got {loss.shape}")
            grad = np.ones_like(loss.data)
        pending = {id(loss): np.asarray(grad, dtype=DTYPE)}
        leaves = {}
        if not loss._from_op and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                if not inp._from_op:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = pending.get(key)
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NonFiniteError(f"gradient of {leaf.name or 'leaf'}", g.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.clear()


class no_grad:
    """Suspend recording: operations inside run without any tape."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    data = np.ascontiguousarray(data, dtype=DTYPE)
    if not np.isfinite(data).all():
        raise NonFiniteError(op, data.shape)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._from_op = True
    tape = active_tape()
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        tape.record(out, inputs, backward, op)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _result(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def apply_mask(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant mask (dropout, head masks)."""
    mask = np.asarray(mask, dtype=DTYPE)
    return _result(a.data * mask, (a,), lambda g: (_unbroadcast(g * mask, a.shape),), "mask")


def dropout(a: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-rate) so eval is the identity."""
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(a.shape) >= rate
    return apply_mask(a, keep / (1.0 - rate))


# --------------------------------------------------------------------------
# shape and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _result(out, (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tensors, backward, "stack")


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``index`` of a matrix."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _result(a.data[index], (a,), backward, "take_rows")


def scatter_rows(a: Tensor, index: np.ndarray, rows: int, fill: float = 0.0) -> Tensor:
    """A ``rows``-row matrix holding ``a``'s rows at ``index``, ``fill`` elsewhere."""
    index = np.asarray(index, dtype=np.int64)
    out = np.full((rows,) + a.shape[1:], fill, dtype=DTYPE)
    out[index] = a.data
    return _result(out, (a,), lambda g: (g[index],), "scatter_rows")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _result(weight.data[ids], (weight,), backward, "embedding")


# --------------------------------------------------------------------------
# normalizations and losses


def softmax(a: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis. ``mask`` (broadcastable, truthy = keep)
    gives excluded entries probability exactly zero."""
    if a.size == 0 or a.shape[-1] == 0:
        raise DimensionError(f"softmax of empty tensor {a.shape}")
    cols = a.shape[-1]
    x2 = a.data.reshape(-1, cols)
    m2 = None
    if mask is not None:
        m2 = np.ascontiguousarray(np.broadcast_to(mask, a.shape).reshape(-1, cols), dtype=np.uint8)
    y = kernels.masked_softmax(x2, m2).reshape(a.shape)

    def backward(g):
        gx = kernels.softmax_backward(y.reshape(-1, cols), np.ascontiguousarray(g).reshape(-1, cols))
        return (gx.reshape(a.shape),)

    return _result(y, (a,), backward, "softmax")


def softmax_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {a.shape}")
    return softmax(a)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    cols = x.shape[-1]
    if gamma.shape != (cols,) or beta.shape != (cols,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs features {cols}")
    xhat2, inv = kernels.layer_norm_forward(x.data.reshape(-1, cols), eps)
    xhat = xhat2.reshape(x.shape)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, cols)
        gx = kernels.layer_norm_backward(xhat2, inv, np.ascontiguousarray(g2 * gamma.data))
        return (
            gx.reshape(x.shape),
            (g2 * xhat2).sum(axis=0),
            g2.sum(axis=0),
        )

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


class BatchNormState:
    """Per-feature affine parameters plus running statistics."""

    def __init__(self, features: int, momentum: float = 0.1, eps: float = 1e-5, name: str = "bn"):
        self.gamma = Tensor(np.ones(features), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(features), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects batch x features, got {x.shape}")
    if x.shape[1] != state.gamma.shape[0]:
        raise DimensionError(f"batch_norm: {x.shape[1]} features vs state of {state.gamma.shape[0]}")
    gamma, beta = state.gamma, state.beta
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv

        def backward_eval(g):
            return (g * gamma.data * inv, (g * xhat).sum(axis=0), g.sum(axis=0))

        return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward_eval, "batch_norm")

    n = x.shape[0]
    if n < 2:
        raise DimensionError("batch_norm in training mode needs a batch of at least 2")
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu
    state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=0) - xhat * (gxhat * xhat).mean(axis=0))
        return (gx, (g * xhat).sum(axis=0), g.sum(axis=0))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "batch_norm")


def cross_entropy(logits: Tensor, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood over the (non-ignored) rows."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects rows x vocab logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != logits.shape[0]:
        raise DimensionError(f"cross_entropy: {logits.shape[0]} rows vs {targets.shape[0]} targets")
    vocab = logits.shape[1]
    keep = np.ones_like(targets, dtype=bool) if ignore_index is None else targets != ignore_index
    if ((targets[keep] < 0) | (targets[keep] >= vocab)).any():
        raise IndexError(f"target index out of range [0, {vocab})")
    count = int(keep.sum())
    if count == 0:
        raise DimensionError("cross_entropy: no targets to score")
    probs = kernels.masked_softmax(logits.data, None)
    safe = np.where(keep, targets, 0)
    rows = np.arange(targets.shape[0])
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted[rows, safe] - np.log(np.exp(shifted).sum(axis=1))
    loss = -(logp * keep).sum() / count

    def backward(g):
        d = probs.copy()
        d[rows, safe] -= 1.0
        d *= keep[:, None] / count
        return (d * g,)

    return _result(np.array(loss), (logits,), backward, "cross_entropy")
