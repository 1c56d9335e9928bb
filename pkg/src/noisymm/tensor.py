"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded; calling
:meth:`Tape.gradient` sweeps the records in reverse and returns one gradient
per requested parameter.  Everything outside a tape is plain numpy math, so
the same model code serves both training and evaluation.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "Adam", "NonFiniteGradientError",
    "as_tensor", "matmul", "add", "sub", "mul", "scale", "neg", "relu", "exp", "log",
    "maximum", "sum", "mean", "transpose", "reshape", "concat", "softmax", "log_softmax",
    "l2_normalize", "square", "finite_diff_check", "FiniteDiffResult",
]

_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes do not conform to the requested operation."""


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    """A float64 array that can take part in recorded computations."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.writeable or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr).copy()
        self.data = arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

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
        return neg(self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records operations for a reverse sweep.

    Used as a context manager::

        with Tape() as tape:
            loss = some_loss(params)
        grads = tape.gradient(loss, params)
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._closed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)
        self._closed = True

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def gradient(self, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to each of ``params``.

        Parameters that did not influence the loss get a zero array of their
        own shape, so the result always lines up one-to-one with ``params``.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward in reversed(self.records):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, backward(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in adj:
                    adj[key] = adj[key] + gi
                else:
                    adj[key] = gi
        return [np.array(adj.get(id(p), np.zeros_like(p.data)), dtype=np.float64).reshape(p.shape)
                for p in params]


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    for tape in _TAPES:
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                           _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def square(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * a.data)
    return _record(out, (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0.0))
    return _record(out, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _record(out, (a,), lambda g: (g * out.data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of a non-positive value")
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max against a constant; the gradient is zero where clipped."""
    a = as_tensor(a)
    keep = a.data >= floor
    out = Tensor(np.where(keep, a.data, floor))
    return _record(out, (a,), lambda g: (g * keep,))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    out = Tensor(data.copy())
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as err:
        raise ShapeError(f"concat: {[p.shape for p in parts]} along axis {axis}: {err}") from None
    out = Tensor(data)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _record(out, parts, backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    soft = np.exp(out.data)
    return _record(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = Tensor(shifted / shifted.sum(axis=axis, keepdims=True))
    s = out.data
    return _record(out, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def l2_normalize(a, axis: int = -1, eps: float = 0.0) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    With ``eps == 0`` zero slices are rejected.  With ``eps > 0`` the norm is
    floored at ``eps``, so an all-zero slice maps to zero instead of failing.
    """
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if eps <= 0 and np.any(norm == 0):
        raise ValueError("l2_normalize: zero-norm vector")
    floored = norm < eps
    denom = np.where(floored, eps, norm)
    y = a.data / denom
    out = Tensor(y)

    def back(g):
        full = (g - y * (g * y).sum(axis=axis, keepdims=True)) / denom
        return (np.where(floored, g / denom, full),)
    return _record(out, (a,), back)


class Adam:
    """Bias-corrected Adam over a named set of parameter tensors.

    Updates parameter arrays in place.  The defaults follow the usual
    ``beta1=0.9, beta2=0.999, eps=1e-8``.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 5e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(grads)
        if missing:
            raise KeyError(f"no gradient for parameters: {sorted(missing)}")
        for name in self.params:
            g = grads[name]
            if g.shape != self.params[name].shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                                 f"parameter has {self.params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.float64)}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out


class FiniteDiffResult:
    def __init__(self, passed: bool, max_rel_error: float, where: tuple[str, tuple] | None):
        self.passed = passed
        self.max_rel_error = max_rel_error
        self.where = where

    def __bool__(self) -> bool:
        return self.passed

    def __repr__(self) -> str:
        return (f"FiniteDiffResult(passed={self.passed}, "
                f"max_rel_error={self.max_rel_error:.3e}, where={self.where})")


def finite_diff_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                      step: float = 1e-5, tolerance: float = 1e-4,
                      analytic: dict[str, np.ndarray] | None = None,
                      abs_floor: float = 1e-6) -> FiniteDiffResult:
    """Compare tape gradients against central differences, element by element.

    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``; the floor keeps
    entries whose true gradient is zero from dividing by round-off.
    ``analytic`` overrides the tape gradient, which is how a corrupted
    gradient is fed in as a negative control.
    """
    names = list(params)
    if analytic is None:
        with Tape() as tape:
            loss = loss_fn()
        analytic = dict(zip(names, tape.gradient(loss, [params[n] for n in names])))
    worst, where = 0.0, None
    for name in names:
        p = params[name].data
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            up = loss_fn().item()
            p[idx] = orig - step
            down = loss_fn().item()
            p[idx] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                return FiniteDiffResult(False, float("inf"), (name, idx))
            num = (up - down) / (2.0 * step)
            ana = analytic[name][idx]
            rel = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            if rel > worst:
                worst, where = rel, (name, idx)
    return FiniteDiffResult(worst <= tolerance, worst, where)

