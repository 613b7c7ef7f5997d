"""Minimal reverse-mode automatic differentiation on NumPy arrays.

A Tensor wraps an ndarray and remembers how it was produced: its parent
tensors plus one vector-Jacobian-product closure per parent. Calling
backward() on a scalar builds the tape (a topological ordering of the
reachable graph), then walks it once in reverse, accumulating gradients.

Scope is deliberately narrow: exactly the operations the controller,
synthesizers and spectral losses need, with broadcasting limited to what
NumPy itself provides. No GPU, no higher-order gradients.

Performance notes (this runs on small CPUs):
  * graph recording is skipped entirely for tensors that do not require
    grad and inside no_grad() blocks, so inference pays almost nothing;
  * fused domain-specific ops (spectrogram magnitude, oscillator bank
    rendering) are built out of custom() with hand-derived adjoints
    instead of long chains of primitive nodes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "custom",
    "no_grad",
    "grad_enabled",
    "build_tape",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "concat",
    "stack",
    "getitem",
    "reshape",
    "transpose",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "leaky_relu",
    "softmax",
    "layer_norm",
    "abs_",
    "sum_",
    "mean_",
    "maximum",
    "power",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An ndarray plus the recorded operation that produced it."""

    __slots__ = ("data", "grad", "parents", "vjps", "requires_grad", "name")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        vjps: tuple[Callable[[np.ndarray], np.ndarray], ...] = (),
        requires_grad: bool | None = None,
        name: str | None = None,
    ):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        if not (_GRAD_ENABLED and requires_grad):
            parents, vjps, requires_grad = (), (), bool(requires_grad and _GRAD_ENABLED)
        self.parents = parents
        self.vjps = vjps
        self.requires_grad = requires_grad
        self.name = name

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar root.

        Visits every reachable node exactly once in reverse topological
        order; leaf tensors (requires_grad, no parents) end up with .grad
        set. Intermediate grads are released as soon as consumed.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar root, got shape {self.data.shape}")
        tape = build_tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if not parent.requires_grad:
                    continue
                contribution = vjp(g)
                if parent.grad is None:
                    parent.grad = contribution
                else:
                    parent.grad = parent.grad + contribution
            if node.parents:  # free intermediate grads, keep leaves
                node.grad = None

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean_(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def build_tape(root: Tensor) -> list[Tensor]:
    """Topological order of the graph reachable from root (iterative DFS).

    The returned list is the tape: reversed, it is the exact visit order
    of the backward pass, each node appearing once.
    """
    tape: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            tape.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return tape


def custom(
    inputs: Sequence[Tensor | np.ndarray],
    value: np.ndarray,
    vjps: Sequence[Callable[[np.ndarray], np.ndarray] | None],
    name: str | None = None,
) -> Tensor:
    """Create an op node with hand-written adjoints.

    vjps[i] maps the output gradient to input i's gradient; pass None for
    non-differentiable inputs (treated as constants).
    """
    tensors = [as_tensor(x) for x in inputs]
    parents, fns = [], []
    for t, fn in zip(tensors, vjps):
        if fn is not None and t.requires_grad:
            parents.append(t)
            fns.append(fn)
    return Tensor(value, tuple(parents), tuple(fns), name=name)


# ---------------------------------------------------------------------------
# Broadcasting helper
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad down to `shape` (reverses NumPy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def _py_scalar(x) -> float | None:
    """Return x as a plain float when it is scalar-like, else None.

    Python scalars go through NumPy's weak promotion, so float32 graphs
    stay float32; wrapping them in 0-d float64 arrays would upcast.
    """
    if isinstance(x, (int, float, np.integer, np.floating)):
        return float(x)
    return None


def add(a, b) -> Tensor:
    if (s := _py_scalar(b)) is not None or (s := _py_scalar(a)) is not None:
        t = as_tensor(a if _py_scalar(b) is not None else b)
        return custom((t,), t.data + s, (lambda g: g,))
    a, b = as_tensor(a), as_tensor(b)
    return custom(
        (a, b),
        a.data + b.data,
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    if (s := _py_scalar(b)) is not None:
        a = as_tensor(a)
        return custom((a,), a.data - s, (lambda g: g,))
    if (s := _py_scalar(a)) is not None:
        b = as_tensor(b)
        return custom((b,), s - b.data, (lambda g: -g,))
    a, b = as_tensor(a), as_tensor(b)
    return custom(
        (a, b),
        a.data - b.data,
        (lambda g: _unbroadcast(g, a.data.shape), lambda g: _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    if (s := _py_scalar(b)) is not None or (s := _py_scalar(a)) is not None:
        t = as_tensor(a if _py_scalar(b) is not None else b)
        return custom((t,), t.data * s, (lambda g: g * s,))
    a, b = as_tensor(a), as_tensor(b)
    return custom(
        (a, b),
        a.data * b.data,
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    if (s := _py_scalar(b)) is not None:
        return mul(a, 1.0 / s)
    if (s := _py_scalar(a)) is not None:
        b = as_tensor(b)
        inv = 1.0 / b.data
        return custom((b,), s * inv, (lambda g: -g * s * inv * inv,))
    a, b = as_tensor(a), as_tensor(b)
    inv = 1.0 / b.data
    return custom(
        (a, b),
        a.data * inv,
        (
            lambda g: _unbroadcast(g * inv, a.data.shape),
            lambda g: _unbroadcast(-g * a.data * inv * inv, b.data.shape),
        ),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul supports 2-D operands, got {a.data.shape} @ {b.data.shape}")
    return custom(
        (a, b),
        a.data @ b.data,
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    value = a.data**exponent
    return custom((a,), value, (lambda g: g * exponent * a.data ** (exponent - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)
    return custom((a,), value, (lambda g: g * value,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return custom((a,), np.log(a.data), (lambda g: g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return custom((a,), value, (lambda g: g * value * (1.0 - value),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    value = np.tanh(a.data)
    return custom((a,), value, (lambda g: g * (1.0 - value * value),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    factor = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return custom((a,), a.data * factor, (lambda g: g * factor,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return custom((a,), np.abs(a.data), (lambda g: g * sign,))


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    value = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.full(a.data.shape, g, dtype=a.data.dtype)
        return np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy()

    return custom((a,), np.asarray(value), (vjp,))


def mean_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def maximum(a, floor: float) -> Tensor:
    """Elementwise max with a constant; subgradient 0 where clamped."""
    a = as_tensor(a)
    mask = (a.data > floor).astype(a.data.dtype)
    return custom((a,), np.maximum(a.data, floor), (lambda g: g * mask,))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    value = a.data[key]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return out

    return custom((a,), value, (vjp,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return custom((a,), a.data.reshape(shape), (lambda g: g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        inverse = None
    else:
        inverse = np.argsort(axes)
    return custom(
        (a,),
        np.transpose(a.data, axes),
        (lambda g: np.transpose(g, inverse),),
    )


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    value = np.concatenate([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        sl = [slice(None)] * value.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return custom(tensors, value, tuple(make_vjp(i) for i in range(len(tensors))))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    value = np.stack([t.data for t in tensors], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return custom(tensors, value, tuple(make_vjp(i) for i in range(len(tensors))))


# ---------------------------------------------------------------------------
# Fused ops used throughout the controller
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * value).sum(axis=axis, keepdims=True)
        return value * (g - dot)

    return custom((a,), value, (vjp,))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    y = gain * (x - mu) / sqrt(var + eps) + bias
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    value = gain.data * xhat + bias.data
    n = x.data.shape[-1]

    def vjp_x(g):
        gg = g * gain.data
        term1 = gg
        term2 = gg.mean(axis=-1, keepdims=True)
        term3 = xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        return inv_std * (term1 - term2 - term3)

    def vjp_gain(g):
        return _unbroadcast(g * xhat, gain.data.shape)

    def vjp_bias(g):
        return _unbroadcast(g, bias.data.shape)

    return custom((x, gain, bias), value, (vjp_x, vjp_gain, vjp_bias))
