"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient
(and recording is enabled) the op is appended to the active :class:`Tape`
together with a closure mapping the output gradient to input gradients.

Broadcasting is deliberately narrow: elementwise binary ops accept operands of
identical shape, or one operand whose shape is a trailing suffix of the other
(a scalar, an ``[N]`` vector against ``[K, S, N]``, ...).
"""
from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count(1)
_recording = True
_tape_stack: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    """Immutable float64 array with optional participation in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _copy: bool = True):
        arr = np.array(data, dtype=np.float64) if _copy else data
        # a sum is non-finite iff some element is (short of ~1e308 overflow)
        if not math.isfinite(arr.sum()):
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.grad: np.ndarray | None = None
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, _copy=False)

    def assign(self, data: np.ndarray) -> None:
        """Replace the stored values (used by optimizers between tapes)."""
        arr = np.array(data, dtype=np.float64)
        if arr.shape != self.shape:
            raise ShapeError(f"cannot assign {arr.shape} into {self.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("non-finite parameter update")
        arr.flags.writeable = False
        self.data = arr

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops; one forward and one backward per tape."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.records.append(_Record(out, inputs, backward))

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Propagate d(loss) back through the recorded ops.

        Leaf tensors that require a gradient get ``.grad`` set; the returned
        map holds the same gradients keyed by ``node_id``. The tape is
        cleared afterwards.
        """
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor requiring grad")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(rec.out.node_id, None)
            if g is None:
                continue
            for inp, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    leaves[inp.node_id] = inp
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = ig if prev is None else prev + ig
        self.records.clear()
        out = {}
        for nid, leaf in leaves.items():
            leaf.grad = np.asarray(grads[nid], dtype=np.float64).reshape(leaf.shape)
            out[nid] = Tensor(leaf.grad, _copy=True)
        return out


_default_tape = Tape()


def current_tape() -> Tape:
    return _tape_stack[-1] if _tape_stack else _default_tape


@contextlib.contextmanager
def no_grad():
    """Disable op recording inside the block."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


def backward(loss: Tensor) -> dict[int, Tensor]:
    return current_tape().backward(loss)


def from_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as an op output, recording ``backward_fn`` if needed.

    ``backward_fn(g)`` must return one gradient (or None) per input.
    """
    arr = np.asarray(data, dtype=np.float64)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    out = Tensor(arr, _copy=False)
    if _recording and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        current_tape().record(out, tuple(inputs), backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), _copy=False)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), _copy=False)


# elementwise binary ops -----------------------------------------------------

def _check_broadcast(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(b) <= len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) <= len(b) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"shapes {a} and {b} are not suffix-broadcastable")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return from_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return from_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return from_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return from_op(out, (a, b), bw)


# unary ops --------------------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def log10(x: Tensor) -> Tensor:
    return mul(log(x), 1.0 / math.log(10.0))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return from_op(out, (x,), lambda g: (0.5 * g / out,))


def square(x: Tensor) -> Tensor:
    return from_op(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return from_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return from_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return from_op(x.data * mask, (x,), lambda g: (g * mask,))


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Leaky ReLU with a single learned negative slope (shape ``[1]``)."""
    if slope.size != 1:
        raise ShapeError("prelu slope must hold one value")
    a = float(slope.data.reshape(()))
    pos = x.data > 0
    out = np.where(pos, x.data, a * x.data)

    def bw(g):
        gs = np.sum(g * np.where(pos, 0.0, x.data))
        return g * np.where(pos, 1.0, a), np.full(slope.shape, gs)

    return from_op(out, (x, slope), bw)


# reductions -----------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return from_op(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axes, keepdims), 1.0 / n)


def center(x: Tensor, axis: int = -1) -> Tensor:
    """Subtract the mean along ``axis``."""
    out = x.data - x.data.mean(axis=axis, keepdims=True)
    return from_op(out, (x,), lambda g: (g - g.mean(axis=axis, keepdims=True),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return from_op(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / n)
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return from_op(out, (x, gain, bias), bw)


# shape ops ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``[..., m, k] @ [k, n]`` (shared right operand) and
    ``[B, m, k] @ [B, k, n]`` (batched, equal batch shape).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        out = a.data @ b.data
        k, n = b.shape

        def bw(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise ShapeError(f"matmul batch shapes differ: {a.shape} @ {b.shape}")
        out = a.data @ b.data

        def bw(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return from_op(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out ``[in, out]``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return from_op(np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(x.shape)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return from_op(np.array(out), (x,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return from_op(out, tuple(tensors), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return from_op(out, tuple(tensors), lambda g: np.split(g, bounds, axis=axis))


def pad(x: Tensor, before: int, after: int, axis: int = 0) -> Tensor:
    """Zero-pad ``axis``; negative ``after`` trims instead."""
    axis %= x.ndim
    n = x.shape[axis]
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, max(after, 0))
    out = np.pad(x.data, widths)
    if after < 0:
        out = np.take(out, np.arange(before + n + after), axis=axis)

    def bw(g):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(before, before + n)
        gx = g[tuple(sl)]
        if after < 0:
            widths_b = [(0, 0)] * x.ndim
            widths_b[axis] = (0, n - gx.shape[axis])
            gx = np.pad(gx, widths_b)
        return (gx,)

    return from_op(out, (x,), bw)


# verification ---------------------------------------------------------------

def finite_diff_grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
                           eps: float = 1e-5, max_elements: int | None = None,
                           rng: np.random.Generator | None = None,
                           analytic: np.ndarray | None = None) -> float:
    """Largest relative gap between the tape gradient and central differences.

    The relative error per element is
    ``|analytic - cd| / max(|analytic|, |cd|, 1e-8)``. ``max_elements`` limits
    the number of probed entries (sampled with ``rng``); ``analytic`` lets a
    caller inject a gradient instead of taking it from the tape.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64)
    if analytic is None:
        leaf = Tensor(base, requires_grad=True)
        with Tape() as tape:
            y = f(leaf)
            tape.backward(y)
        analytic = leaf.grad
    analytic = np.asarray(analytic, dtype=np.float64).reshape(base.shape)

    flat_idx = np.arange(base.size)
    if max_elements is not None and base.size > max_elements:
        rng = rng or np.random.default_rng(0)
        flat_idx = rng.choice(base.size, size=max_elements, replace=False)

    def value(arr):
        with no_grad():
            v = f(Tensor(arr, _copy=False)).data
        if v.size != 1 or not np.isfinite(v).all():
            raise NonFiniteError("grad check function must return a finite scalar")
        return float(v.reshape(()))

    worst = 0.0
    for i in flat_idx:
        pos = base.copy()
        neg = base.copy()
        pos.flat[i] += eps
        neg.flat[i] -= eps
        cd = (value(pos) - value(neg)) / (2.0 * eps)
        a = analytic.flat[i]
        err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
        worst = max(worst, err)
    return worst
