"""Small reverse-mode autodiff over dense float64 arrays.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active
(``with tape:``) every primitive appends a record holding its output, its
inputs and a closure mapping the output gradient to input gradients.
:meth:`Tape.backward` replays those records in reverse order and
accumulates into :attr:`Param.grad`. Without an active tape nothing is
recorded, which is the inference path.
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from .exceptions import ContractError, ShapeError

__all__ = [
    "Tensor", "Param", "Tape", "backward", "as_tensor",
    "matmul", "add", "sub", "mul", "scale", "add_bias", "mul_rowvec",
    "mul_colvec", "relu", "sigmoid", "softmax", "log_softmax", "square",
    "sum_all", "sum_cols", "mean", "reshape", "concat_cols", "take_cols", "take_rows",
    "softmax_cross_entropy", "sigmoid_binary_cross_entropy",
]

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A float64 array, optionally tied to the tape that produced it."""

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "Tape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class Param(Tensor):
    """Trainable leaf tensor with a gradient buffer of the same shape."""

    __slots__ = ("grad", "id", "name")
    _ids = itertools.count()

    def __init__(self, value, name: str = ""):
        super().__init__(np.array(value, dtype=np.float64))
        self.grad = np.zeros_like(self.data)
        self.id = next(Param._ids)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of primitive operations for one forward pass.

    A tape is single-threaded; use one tape per worker. Entering a tape
    makes it the recording target for the current thread only.
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, grad_fn: Callable) -> None:
        out.tape = self
        self.records.append((out, inputs, grad_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(
                f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise ContractError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, grad_fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, grad_fn(g)):
                if gi is None:
                    continue
                if isinstance(t, Param):
                    t.grad += gi
                elif t.tape is self:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gi
                    else:
                        grads[key] = gi


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every Param reachable from the scalar ``loss``."""
    if loss.tape is None:
        raise ContractError("loss was not recorded on a tape")
    loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple, grad_fn: Callable) -> Tensor:
    tape = _active_tape()
    out = Tensor(data)
    if tape is not None and any(
            isinstance(t, Param) or t.tape is tape for t in inputs):
        tape.record(out, inputs, grad_fn)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def add_bias(x, b) -> Tensor:
    """``x[m, d] + b[d]``, the bias broadcast over rows."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    return _emit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def mul_rowvec(x, r) -> Tensor:
    """``x[m, d] * r[d]``: scale every column ``j`` by ``r[j]``."""
    x, r = as_tensor(x), as_tensor(r)
    if x.data.ndim != 2 or r.shape != (x.shape[1],):
        raise ShapeError(f"mul_rowvec: {r.shape} does not fit {x.shape}")
    xd, rd = x.data, r.data
    return _emit(xd * rd, (x, r),
                 lambda g: (g * rd, (g * xd).sum(axis=0)))


def mul_colvec(x, c) -> Tensor:
    """``x[m, d] * c[m, 1]``: scale every row ``i`` by ``c[i]``."""
    x, c = as_tensor(x), as_tensor(c)
    if x.data.ndim != 2 or c.shape != (x.shape[0], 1):
        raise ShapeError(f"mul_colvec: {c.shape} does not fit {x.shape}")
    xd, cd = x.data, c.data
    return _emit(xd * cd, (x, c),
                 lambda g: (g * cd, (g * xd).sum(axis=1, keepdims=True)))


# -- elementwise nonlinearities --------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _stable_sigmoid(x.data)
    return _emit(out, (x,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _emit(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis, max-shifted."""
    x = as_tensor(x)
    if x.data.size == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax: empty input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _emit(out, (x,), grad_fn)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    out = _log_softmax(x.data)
    p = np.exp(out)
    return _emit(out, (x,),
                 lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


# -- reductions and reshaping ----------------------------------------------

def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,),
                 lambda g: (np.full(shape, float(g)),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return _emit(np.array(x.data.mean()), (x,),
                 lambda g: (np.full(shape, float(g) / n),))


def sum_cols(x) -> Tensor:
    """Sum across columns: ``[m, d] -> [m, 1]``."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"sum_cols: expected 2-D, got {x.shape}")
    d = x.shape[1]
    return _emit(x.data.sum(axis=1, keepdims=True), (x,),
                 lambda g: (np.repeat(g, d, axis=1),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat_cols(parts: Sequence) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.data.ndim != 2 for p in parts):
        raise ShapeError(
            f"concat_cols: incompatible shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def grad_fn(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))
    return _emit(np.concatenate([p.data for p in parts], axis=1), parts,
                 grad_fn)


def take_cols(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, (slice(None), idx), g)
        return (full,)
    return _emit(x.data[:, idx], (x,), grad_fn)


def take_rows(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)
    return _emit(x.data[idx], (x,), grad_fn)


# -- fused losses ------------------------------------------------------------

def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-row ``-log softmax(logits)[label]`` via log-sum-exp, shape ``[m]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape}, "
            f"labels {labels.shape}")
    rows = np.arange(labels.size)
    logp = _log_softmax(logits.data)
    p = np.exp(logp)

    def grad_fn(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * g[:, None],)
    return _emit(-logp[rows, labels], (logits,), grad_fn)


def sigmoid_binary_cross_entropy(logit, y) -> Tensor:
    """Per-row BCE from a pre-sigmoid logit column ``[m, 1]``, shape ``[m]``."""
    logit = as_tensor(logit)
    y = np.asarray(y, dtype=np.float64)
    if logit.shape != (y.size, 1):
        raise ShapeError(
            f"sigmoid_binary_cross_entropy: logit {logit.shape}, "
            f"labels {y.shape}")
    z = logit.data[:, 0]
    # max(z,0) - z*y + log(1+exp(-|z|))
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = _stable_sigmoid(z)
    return _emit(loss, (logit,), lambda g: (((p - y) * g)[:, None],))
