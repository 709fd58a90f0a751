"""Tape-based reverse-mode autodiff over dense float64 arrays.

Every trainable component in this package (encoders, classifier heads,
feature upgrade modules) runs on these primitives. Operations record onto
the innermost active ``Tape``; with no active tape they are plain forward
computations, which is how eval-mode embedding avoids any bookkeeping.

Tapes are thread-local. Independent experiments may run on separate
threads as long as each thread owns its tensors and its tape; nothing
here is shared between tapes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class Tensor:
    """Dense float64 array plus gradient bookkeeping."""

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mean(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list["Tape"] = []


_ACTIVE = _TapeStack()


class Tape:
    """Ordered record of operations, topological by construction.

    Use as a context manager around forward passes that will be
    differentiated. One backward() traversal visits each recorded
    operation exactly once.
    """

    def __init__(self):
        self.ops: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _ACTIVE.stack.pop()
        assert popped is self, "tape contexts must nest properly"
        return False

    def __len__(self) -> int:
        return len(self.ops)


def _active_tape() -> Tape | None:
    stack = _ACTIVE.stack
    return stack[-1] if stack else None


def _record(out: Tensor, inputs: Sequence[Tensor],
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.ops.append(_Record(out, tuple(inputs), backward))
    return out


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor that fed into ``loss``.

    Repeated calls accumulate into existing .grad arrays.
    """
    if loss.size != 1:
        raise ValueError(f"backward() requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not produced by operations recorded on a tape")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.ops):
        g = adjoint.get(id(rec.out))
        if g is None:
            continue
        grads = rec.backward(g)
        for t, gt in zip(rec.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + gt
            else:
                adjoint[key] = gt
                touched[key] = t
    for key, t in touched.items():
        g = adjoint[key]
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.values + b.values)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.values - b.values)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.values * b.values)

    def bwd(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record(out, (a, b), bwd)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.values * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    out = Tensor(a.values @ b.values)

    def bwd(g):
        return g @ b.values.T, a.values.T @ g

    return _record(out, (a, b), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError(f"transpose expects a 2-d tensor, got shape {a.shape}")
    out = Tensor(a.values.T)
    return _record(out, (a,), lambda g: (g.T,))


def relu(a: Tensor) -> Tensor:
    # Subgradient at 0 is taken as 0.
    mask = a.values > 0.0
    out = Tensor(np.where(mask, a.values, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.values))
    return _record(out, (a,), lambda g: (g * out.values,))


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise ValueError("log: domain error, input must be strictly positive")
    out = Tensor(np.log(a.values))
    return _record(out, (a,), lambda g: (g / a.values,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.values <= 0.0):
        raise ValueError("sqrt: domain error, input must be strictly positive")
    out = Tensor(np.sqrt(a.values))
    return _record(out, (a,), lambda g: (g * (0.5 / out.values),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the range."""
    out = Tensor(np.clip(a.values, lo, hi))
    mask = (a.values >= lo) & (a.values <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.values.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _record(out, (a,), bwd)


def mean(a: Tensor) -> Tensor:
    return scalar_mul(reduce_sum(a), 1.0 / a.size)


def l2_normalize(v: Tensor) -> Tensor:
    """Normalize along the last axis to unit Euclidean norm.

    Raises on rows whose norm is at or below NORM_EPS (degenerate input).
    """
    norms = np.linalg.norm(v.values, axis=-1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise ValueError(f"l2_normalize: degenerate input, row norm <= {NORM_EPS}")
    y = v.values / norms
    out = Tensor(y)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _record(out, (v,), bwd)


@dataclass
class RunningStats:
    """Per-feature running mean/var used by batchnorm in eval mode."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, dim: int) -> "RunningStats":
        return cls(mean=np.zeros(dim), var=np.ones(dim))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
              train: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Batch normalization over axis 0 with learnable scale and shift.

    Train mode normalizes by batch statistics and updates ``stats`` in
    place (unbiased variance for the running estimate, biased for the
    normalization itself, matching common framework behaviour). Eval mode
    normalizes by the running statistics.
    """
    if x.values.ndim != 2:
        raise ValueError(f"batchnorm expects a 2-d batch, got shape {x.shape}")
    n = x.shape[0]
    if train:
        if n < 2:
            raise ValueError("batchnorm: train mode needs a batch of size >= 2")
        mu = x.values.mean(axis=0)
        var = x.values.var(axis=0)
        istd = 1.0 / np.sqrt(var + eps)
        xhat = (x.values - mu) * istd
        stats.mean[...] = (1.0 - momentum) * stats.mean + momentum * mu
        stats.var[...] = (1.0 - momentum) * stats.var + momentum * var * (n / (n - 1))
        out = Tensor(gamma.values * xhat + beta.values)

        def bwd(g):
            dgamma = (g * xhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            dxhat = g * gamma.values
            dx = (istd / n) * (n * dxhat - dxhat.sum(axis=0)
                               - xhat * (dxhat * xhat).sum(axis=0))
            return dx, dgamma, dbeta

        return _record(out, (x, gamma, beta), bwd)

    istd = 1.0 / np.sqrt(stats.var + eps)
    xhat = (x.values - stats.mean) * istd
    out = Tensor(gamma.values * xhat + beta.values)

    def bwd_eval(g):
        return g * (gamma.values * istd), (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, (x, gamma, beta), bwd_eval)
