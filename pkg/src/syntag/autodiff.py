"""Reverse-mode automatic differentiation on dense float64 arrays.

This is a small tape-based autodiff core, just large enough for the models in
this package. Design points:

* Everything is float64. Inputs of other dtypes are converted on the way in.
* Gradients are recorded on an explicit :class:`Tape`. Ops executed while no
  tape is active run as plain numpy and record nothing, which doubles as the
  inference mode: forward passes for evaluation or finite differences pay no
  bookkeeping cost.
* The tape is rebuilt on every step, so control flow in model code is plain
  Python (loops over timesteps of varying length are fine).
* relu has derivative 0 at exactly 0.

A minimal example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    x = constant(rng.normal(size=(2, 4)))
    with Tape() as tape:
        y = relu(matmul(w, x))
        loss = y.sum()
    backward(loss)
    # w.grad now holds d loss / d w
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, StateError

__all__ = [
    "Tensor",
    "Tape",
    "constant",
    "backward",
    "clear_grads",
    "add",
    "sub",
    "mul",
    "matmul",
    "bmm_const",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "concat",
    "reshape",
    "logsumexp",
    "rows",
    "take",
]

_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A float64 array plus an optional gradient buffer.

    ``requires_grad`` marks leaves the caller wants gradients for.
    Intermediate results created while a tape is active are tracked
    automatically when any of their inputs are tracked.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def item(self):
        return float(self.data)

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
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def constant(data):
    """Wrap an array as a Tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


def _wrap(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class Tape:
    """Records the operations needed to run one backward pass.

    Use as a context manager around the forward computation. A tape can be
    consumed by :func:`backward` exactly once; reuse raises StateError.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - indicates interpreter misuse
            raise StateError("tape stack corrupted: exited a tape that is not innermost")
        return False

    def _record(self, out, inputs, backward_fn):
        out.requires_grad = True
        out._tape = self
        self._nodes.append((out, inputs, backward_fn))

    def backward(self, loss):
        """Run reverse accumulation from ``loss`` through this tape."""
        if self._consumed:
            raise StateError("tape already consumed: backward may run once per tape")
        if not isinstance(loss, Tensor):
            raise ContractError("backward expects a Tensor loss")
        if loss.data.shape != ():
            raise DimensionError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        if loss._tape is not self:
            raise ContractError("loss does not lie on this tape")
        self._consumed = True
        loss.grad = np.ones((), dtype=np.float64)
        for out, inputs, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                # Accumulation always builds a fresh array, so views returned
                # by backward closures are safe to hold.
                if inp.grad is None:
                    inp.grad = g
                else:
                    inp.grad = inp.grad + g


def backward(loss):
    """Backpropagate from a scalar loss recorded on some active tape."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss._tape is None:
        raise ContractError("loss was not recorded on any tape")
    loss._tape.backward(loss)


def clear_grads(tensors):
    """Reset the gradient buffers of an iterable (or dict) of tensors."""
    if isinstance(tensors, dict):
        tensors = tensors.values()
    for t in tensors:
        t.grad = None


def _maybe_record(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise DimensionError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "add")
    out = Tensor(a.data + b.data)

    def bk(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _maybe_record(out, (a, b), bk)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bk(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _maybe_record(out, (a, b), bk)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, "mul")
    out = Tensor(a.data * b.data)
    a_data, b_data = a.data, b.data

    def bk(g):
        return (
            _unbroadcast(g * b_data, a_data.shape),
            _unbroadcast(g * a_data, b_data.shape),
        )

    return _maybe_record(out, (a, b), bk)


def matmul(a, b):
    """2-D matrix product."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}"
        )
    out = Tensor(a.data @ b.data)
    a_data, b_data = a.data, b.data

    def bk(g):
        return g @ b_data.T, a_data.T @ g

    return _maybe_record(out, (a, b), bk)


def bmm_const(mats, a):
    """Batched product ``mats @ a`` where ``mats`` is a constant ndarray.

    mats has shape (B, n, m) and a has shape (B, m, k). Used for sparse-ish
    aggregation with per-sentence adjacency matrices; only ``a`` carries
    gradients, the matrices are data.
    """
    mats = np.asarray(mats, dtype=np.float64)
    if mats.ndim != 3 or a.data.ndim != 3:
        raise DimensionError(
            f"bmm_const expects 3-D operands, got {mats.shape} and {a.data.shape}"
        )
    if mats.shape[0] != a.data.shape[0] or mats.shape[2] != a.data.shape[1]:
        raise DimensionError(
            f"bmm_const: incompatible shapes {mats.shape} and {a.data.shape}"
        )
    out = Tensor(np.matmul(mats, a.data))
    mats_t = mats.swapaxes(1, 2)

    def bk(g):
        return (np.matmul(mats_t, g),)

    return _maybe_record(out, (a,), bk)


def sigmoid(a):
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    out = Tensor(out_data)

    def bk(g):
        return (g * out_data * (1.0 - out_data),)

    return _maybe_record(out, (a,), bk)


def tanh(a):
    out_data = np.tanh(a.data)
    out = Tensor(out_data)

    def bk(g):
        return (g * (1.0 - out_data * out_data),)

    return _maybe_record(out, (a,), bk)


def relu(a):
    out_data = np.maximum(a.data, 0.0)
    out = Tensor(out_data)
    positive = a.data > 0.0  # derivative at exactly 0 is defined as 0

    def bk(g):
        return (g * positive,)

    return _maybe_record(out, (a,), bk)


def exp(a):
    out_data = np.exp(a.data)
    out = Tensor(out_data)

    def bk(g):
        return (g * out_data,)

    return _maybe_record(out, (a,), bk)


def log(a):
    out = Tensor(np.log(a.data))
    a_data = a.data

    def bk(g):
        return (g / a_data,)

    return _maybe_record(out, (a,), bk)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise DimensionError(
                f"concat: rank mismatch {tensors[0].data.shape} vs {t.data.shape}"
            )
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        raise DimensionError(
            "concat: shapes " + ", ".join(str(t.data.shape) for t in tensors)
            + f" do not align off axis {axis}"
        ) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bk(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _maybe_record(out, tuple(tensors), bk)


def reshape(a, shape):
    in_shape = a.data.shape
    try:
        out = Tensor(a.data.reshape(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {in_shape} to {shape}") from None

    def bk(g):
        return (g.reshape(in_shape),)

    return _maybe_record(out, (a,), bk)


def _sum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    in_shape = a.data.shape

    def bk(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(a_ % len(in_shape) for a_ in ax)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, in_shape).copy(),)

    return _maybe_record(out, (a,), bk)


def logsumexp(a, axis):
    """log(sum(exp(a))) along ``axis``, stabilized by the running max.

    Entries equal to -inf behave as missing terms; a slice that is all -inf
    yields -inf with zero gradient everywhere.
    """
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out_keep = np.log(np.sum(np.exp(x - m_safe), axis=axis, keepdims=True)) + m_safe
    out = Tensor(np.squeeze(out_keep, axis=axis))
    out_safe = np.where(np.isfinite(out_keep), out_keep, 0.0)
    softmax = np.exp(x - out_safe)
    softmax[~np.isfinite(x)] = 0.0

    def bk(g):
        return (np.expand_dims(g, axis) * softmax,)

    return _maybe_record(out, (a,), bk)


def rows(a, idx):
    """Gather rows of a 2-D tensor: out[i] = a[idx[i]].

    The backward pass scatter-adds, so repeated indices accumulate.
    """
    if a.data.ndim != 2:
        raise DimensionError(f"rows expects a 2-D tensor, got shape {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise DimensionError(f"rows expects a 1-D index array, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[0]):
        raise ContractError(
            f"rows: index out of range for tensor with {a.data.shape[0]} rows"
        )
    out = Tensor(a.data[idx])
    in_shape = a.data.shape

    def bk(g):
        da = np.zeros(in_shape, dtype=np.float64)
        np.add.at(da, idx, g)
        return (da,)

    return _maybe_record(out, (a,), bk)


def take(a, flat_idx):
    """Gather arbitrary elements by flat (C-order) index into a 1-D tensor."""
    flat_idx = np.asarray(flat_idx, dtype=np.intp)
    if flat_idx.ndim != 1:
        raise DimensionError(f"take expects a 1-D index array, got shape {flat_idx.shape}")
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= a.data.size):
        raise ContractError(
            f"take: flat index out of range for tensor with {a.data.size} elements"
        )
    out = Tensor(a.data.ravel()[flat_idx])
    in_shape = a.data.shape

    def bk(g):
        da = np.zeros(a.data.size, dtype=np.float64)
        np.add.at(da, flat_idx, g)
        return (da.reshape(in_shape),)

    return _maybe_record(out, (a,), bk)
