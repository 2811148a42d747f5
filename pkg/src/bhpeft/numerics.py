"""Dense float64 arithmetic with a small reverse-mode gradient engine.

Plain ``numpy.ndarray`` (float64, C order) is the tensor type. ``Var`` wraps
an array as a node of a dynamically recorded computation graph; calling
:func:`backward` on a scalar node accumulates ``.grad`` into every leaf that
requires it. Only the operations the transformer and the variational
objective need are provided.

Example
-------
>>> w = Var(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
>>> grads = backward(sum_all(w * w))
>>> grads[w]
array([[2., 4.],
       [6., 8.]])
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Var":
        return Var(self.value)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _accumulate(node: Var, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    node.grad = g if node.grad is None else node.grad + g


def _result(value: np.ndarray, parents: Sequence[Var], backward_fn) -> Var:
    out = Var(value)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise ---------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.value + b.value, (a, b), bw)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.value - b.value, (a, b), bw)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.value, a.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _result(a.value * b.value, (a, b), bw)


def neg(a) -> Var:
    a = as_var(a)
    return _result(-a.value, (a,), lambda g: _accumulate(a, -g))


def scale(a, c: float) -> Var:
    a = as_var(a)
    return _result(a.value * c, (a,), lambda g: _accumulate(a, g * c))


def square(a) -> Var:
    a = as_var(a)
    return _result(a.value * a.value, (a,), lambda g: _accumulate(a, 2.0 * a.value * g))


def log(a) -> Var:
    a = as_var(a)
    return _result(np.log(a.value), (a,), lambda g: _accumulate(a, g / a.value))


def clamp_min(a, floor: float) -> Var:
    """max(a, floor); gradient is zero where the floor is active."""
    a = as_var(a)
    keep = a.value >= floor
    return _result(np.where(keep, a.value, floor), (a,), lambda g: _accumulate(a, g * keep))


def tanh(a) -> Var:
    a = as_var(a)
    t = np.tanh(a.value)
    return _result(t, (a,), lambda g: _accumulate(a, g * (1.0 - t * t)))


def relu(a) -> Var:
    a = as_var(a)
    on = a.value > 0
    return _result(np.where(on, a.value, 0.0), (a,), lambda g: _accumulate(a, g * on))


_ACTIVATIONS = {"relu": relu, "tanh": tanh}


def activation(kind: str, x) -> Var:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# linear algebra and shape ----------------------------------------------------


def matmul(a, b) -> Var:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_var(a), as_var(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _result(a.value @ b.value, (a, b), bw)


def reshape(a, shape: tuple[int, ...]) -> Var:
    a = as_var(a)
    return _result(a.value.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a, axes: tuple[int, ...]) -> Var:
    a = as_var(a)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.value, axes), (a,), lambda g: _accumulate(a, np.transpose(g, inv)))


def broadcast_to(a, shape: tuple[int, ...]) -> Var:
    a = as_var(a)
    return _result(
        np.broadcast_to(a.value, shape).copy(), (a,), lambda g: _accumulate(a, _unbroadcast(g, a.shape))
    )


def concat(parts: Sequence, axis: int) -> Var:
    parts = [as_var(p) for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, bounds, axis=axis)):
            _accumulate(p, gp)

    return _result(value, parts, bw)


def sum_all(a) -> Var:
    a = as_var(a)
    return _result(np.asarray(a.value.sum()), (a,), lambda g: _accumulate(a, np.broadcast_to(g, a.shape).copy()))


def sum_axis(a, axis: int) -> Var:
    a = as_var(a)

    def bw(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _result(a.value.sum(axis=axis), (a,), bw)


def pick(a, index: np.ndarray) -> Var:
    """Select ``a[i, index[i]]`` from a 2-D node."""
    a = as_var(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros(a.shape)
        full[rows, index] = g
        _accumulate(a, full)

    return _result(a.value[rows, index], (a,), bw)


# normalisation ---------------------------------------------------------------


def softmax_value(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    s = softmax_value(a.value, axis)

    def bw(g):
        _accumulate(a, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _result(s, (a,), bw)


def softmax_rows(x) -> Var:
    x = as_var(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=1)


def log_softmax(a, axis: int = -1) -> Var:
    a = as_var(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        _accumulate(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = LAYER_NORM_EPS) -> Var:
    """Normalise over the last axis (population variance), then scale and shift."""
    x, gamma, beta = as_var(x), as_var(gamma), as_var(beta)
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mean = x.value.mean(axis=-1, keepdims=True)
    centred = x.value - mean
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv_std

    def bw(g):
        if x.requires_grad:
            gx = g * gamma.value
            gx = inv_std * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, gx)
        if gamma.requires_grad:
            _accumulate(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accumulate(beta, _unbroadcast(g, beta.shape))

    return _result(xhat * gamma.value + beta.value, (x, gamma, beta), bw)


# backward --------------------------------------------------------------------


def _topological(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var, wrt: Iterable[Var] | None = None) -> dict[Var, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    Returns a map leaf -> gradient. If ``wrt`` is given the map holds exactly
    those leaves, with zeros for leaves the loss does not depend on.
    Intermediate nodes are released afterwards so the graph cannot be
    replayed by accident.
    """
    if not isinstance(loss, Var) or loss.value.size != 1:
        shape = loss.shape if isinstance(loss, Var) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss node, got {shape}")
    order = _topological(loss)
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
    leaves = {}
    for node in order:
        if node._backward is None:
            if node.requires_grad and node.grad is not None:
                leaves[node] = node.grad
        else:
            node.grad = None
            node._parents = ()
            node._backward = None
    if wrt is None:
        return leaves
    return {w: leaves.get(w, np.zeros(w.shape)) for w in wrt}
