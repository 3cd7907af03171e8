"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` walks the graph in reverse topological order and
accumulates into the ``grad`` of leaf tensors created with
``requires_grad=True`` (normally :class:`Parameter`).  Leaf gradients are
additive across backward passes until :func:`zero_grad` is called.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError, TargetError

DTYPE = np.float64


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=DTYPE)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == DTYPE else _as_array(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad and not _parents else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward (implicit seed needs a scalar)", self.shape)
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad)
            if grad.shape != self.shape:
                raise ShapeError("backward", self.shape, grad.shape)
        if not self.requires_grad:
            return

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """Trainable leaf tensor with a stable identity.

    ``pid`` is ``(layer, block, slot)``; layer 0 holds routing-hypernetwork
    parameters, layer 1 the encoders and layers >= 2 the modular blocks.
    """

    __slots__ = ("pid",)

    def __init__(self, value, pid: tuple):
        super().__init__(_as_array(value), requires_grad=True)
        self.pid = tuple(pid)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def gradient(self) -> np.ndarray:
        return self.grad

    def __repr__(self) -> str:
        return f"Parameter(pid={self.pid}, shape={self.shape})"


def tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(_as_array(value))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (),
                  _backward=backward if needs else None)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), backward)


def neg(a) -> Tensor:
    a = tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape (batch, d_in)."""
    x, weight, bias = tensor(x), tensor(weight), tensor(bias)
    if (x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1
            or x.shape[1] != weight.shape[0] or bias.shape[0] != weight.shape[1]):
        raise ShapeError("affine", x.shape, weight.shape, bias.shape)
    out = x.data @ weight.data + bias.data
    return _node(out, (x, weight, bias),
                 lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a) -> Tensor:
    a = tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def sqrt(a) -> Tensor:
    a = tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out, dtype=DTYPE), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def take(a, index) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with accumulation."""
    a = tensor(a)
    out = np.array(a.data[index], dtype=DTYPE)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), backward)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(p.shape for p in parts)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, parts, backward)


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _check_one_hot(targets: np.ndarray) -> None:
    for row, values in enumerate(targets):
        if not (np.count_nonzero(values == 1.0) == 1 and np.count_nonzero(values) == 1):
            raise TargetError(row, values)


def softmax_cross_entropy(logits, one_hot_targets) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    logits = tensor(logits)
    targets = np.asarray(one_hot_targets.data if isinstance(one_hot_targets, Tensor)
                         else one_hot_targets, dtype=DTYPE)
    if logits.data.ndim != 2 or targets.shape != logits.shape:
        raise ShapeError("softmax_cross_entropy", logits.shape, targets.shape)
    _check_one_hot(targets)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    batch = logits.shape[0]
    loss = -(targets * log_probs).sum() / batch

    def backward(g):
        return (g * (np.exp(log_probs) - targets) / batch,)

    return _node(np.asarray(loss, dtype=DTYPE), (logits,), backward)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0.0


def sgd_step(params: Iterable[Parameter], learning_rate: float) -> None:
    """In-place ``value -= learning_rate * gradient``; gradients are left untouched."""
    if not learning_rate > 0:
        raise ConfigError(f"learning_rate must be positive, got {learning_rate!r}")
    for p in params:
        p.data -= learning_rate * p.grad
