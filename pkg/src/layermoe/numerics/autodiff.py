"""Reverse-mode automatic differentiation over float64 numpy arrays.

A small tape: every operation records its parent tensors and a closure that
maps the output gradient to parent gradients. Only the operations the toy
transformer and its losses need are implemented. The correctness contract is
agreement with central finite differences (see ``central_difference``), not
any property of the internals.

All arithmetic is float64. Graphs are only recorded when some input has
``requires_grad`` set, so evaluation with frozen parameters pays no tape
cost and follows the exact same floating-point path as training.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ..errors import NumericalFailureError

__all__ = [
    "Tensor",
    "as_tensor",
    "assemble_rows",
    "softmax",
    "log_softmax",
    "silu",
    "embedding",
    "take_along",
    "take_rows",
    "take_pairs",
    "scatter_rows",
    "stack_columns",
    "zero_grads",
    "value_and_grad",
    "central_difference",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array plus an optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- plumbing ----------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autograd ----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``self`` into every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward(node.grad)):
                if pgrad is None or not parent.requires_grad:
                    continue
                parent.grad = pgrad if parent.grad is None else parent.grad + pgrad

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out = _node(self.data + other.data, (self, other))
        if out._parents:
            a_shape, b_shape = self.data.shape, other.data.shape
            out._backward = lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape))
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        if out._parents:
            out._backward = lambda g: (-g,)
        return out

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out = _node(self.data * other.data, (self, other))
        if out._parents:
            a, b = self, other
            out._backward = lambda g: (
                _unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape),
            )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out = _node(self.data / other.data, (self, other))
        if out._parents:
            a, b = self, other
            out._backward = lambda g: (
                _unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
            )
        return out

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = _node(self.data**exponent, (self,))
        if out._parents:
            a = self
            out._backward = lambda g: (g * exponent * a.data ** (exponent - 1),)
        return out

    def __matmul__(self, other):
        other = as_tensor(other)
        out = _node(self.data @ other.data, (self, other))
        if out._parents:
            a, b = self, other
            out._backward = lambda g: (
                _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape),
                _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape),
            )
        return out

    # -- shape ops ---------------------------------------------------------

    def reshape(self, shape) -> "Tensor":
        out = _node(self.data.reshape(shape), (self,))
        if out._parents:
            old = self.data.shape
            out._backward = lambda g: (g.reshape(old),)
        return out

    def transpose(self, axes) -> "Tensor":
        out = _node(np.transpose(self.data, axes), (self,))
        if out._parents:
            inverse = tuple(np.argsort(axes))
            out._backward = lambda g: (np.transpose(g, inverse),)
        return out

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._parents:
            shape = self.data.shape

            def bw(g):
                if axis is None:
                    return (np.broadcast_to(g, shape).copy(),)
                if not keepdims:
                    g = np.expand_dims(g, axis)
                return (np.broadcast_to(g, shape).copy(),)

            out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            count = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise functions ----------------------------------------------

    def log(self) -> "Tensor":
        out = _node(np.log(self.data), (self,))
        if out._parents:
            a = self
            out._backward = lambda g: (g / a.data,)
        return out

    def exp(self) -> "Tensor":
        out = _node(np.exp(self.data), (self,))
        if out._parents:
            out._backward = lambda g: (g * out.data,)
        return out


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(t: Tensor) -> Tensor:
    """x * sigmoid(x), the gate activation used by the experts."""
    s = _sigmoid(t.data)
    out = _node(t.data * s, (t,))
    if out._parents:
        out._backward = lambda g: (g * (s * (1.0 + t.data * (1.0 - s))),)
    return out


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (t,))
    if out._parents:
        out._backward = lambda g: ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)
    return out


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = _node(y, (t,))
    if out._parents:
        out._backward = lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)
    return out


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: result shape = ids.shape + (width,)."""
    ids = np.asarray(ids)
    out = _node(weight.data[ids], (weight,))
    if out._parents:
        width = weight.data.shape[-1]

        def bw(g):
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids.reshape(-1), g.reshape(-1, width))
            return (gw,)

        out._backward = bw
    return out


def take_along(t: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along the last axis of a 2-d tensor; indices has the output shape."""
    indices = np.asarray(indices)
    out = _node(np.take_along_axis(t.data, indices, axis=1), (t,))
    if out._parents:
        rows = np.arange(t.data.shape[0])[:, None]

        def bw(g):
            gt = np.zeros_like(t.data)
            np.add.at(gt, (rows, indices), g)
            return (gt,)

        out._backward = bw
    return out


def take_rows(t: Tensor, rows: np.ndarray) -> Tensor:
    """Gather whole rows of a 2-d tensor."""
    rows = np.asarray(rows)
    out = _node(t.data[rows], (t,))
    if out._parents:

        def bw(g):
            gt = np.zeros_like(t.data)
            np.add.at(gt, rows, g)
            return (gt,)

        out._backward = bw
    return out


def take_pairs(t: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather scalar entries (rows[i], cols[i]) of a 2-d tensor."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = _node(t.data[rows, cols], (t,))
    if out._parents:

        def bw(g):
            gt = np.zeros_like(t.data)
            np.add.at(gt, (rows, cols), g)
            return (gt,)

        out._backward = bw
    return out


def scatter_rows(values: Tensor, rows: np.ndarray, num_rows: int) -> Tensor:
    """Inverse of take_rows: place rows into a zero (num_rows, width) tensor."""
    rows = np.asarray(rows)
    data = np.zeros((num_rows, values.data.shape[1]), dtype=np.float64)
    np.add.at(data, rows, values.data)
    out = _node(data, (values,))
    if out._parents:
        out._backward = lambda g: (g[rows],)
    return out


def assemble_rows(pieces: Sequence[tuple[np.ndarray, Tensor]], num_rows: int) -> Tensor:
    """Assemble disjoint row blocks into one (num_rows, width) tensor by
    assignment, so each output row is bit-identical to its source row."""
    width = pieces[0][1].data.shape[1]
    data = np.empty((num_rows, width), dtype=np.float64)
    filled = 0
    for rows, values in pieces:
        data[rows] = values.data
        filled += len(rows)
    if filled != num_rows:
        raise ValueError("row pieces must partition the output")
    out = _node(data, tuple(values for _, values in pieces))
    if out._parents:
        row_sets = [np.asarray(rows) for rows, _ in pieces]
        out._backward = lambda g: tuple(g[rows] for rows in row_sets)
    return out


def stack_columns(columns: Sequence[Tensor]) -> Tensor:
    """Stack 1-d tensors of length h into an (h, n) matrix."""
    out = _node(np.stack([c.data for c in columns], axis=1), tuple(columns))
    if out._parents:
        out._backward = lambda g: tuple(g[:, i] for i in range(len(columns)))
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def value_and_grad(
    loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate a scalar loss and return its gradient for every named parameter.

    Parameters not touched by the loss get zero gradients. Raises
    NumericalFailureError if the loss is non-finite.
    """
    previous = {name: p.requires_grad for name, p in params.items()}
    try:
        for p in params.values():
            p.requires_grad = True
            p.grad = None
        loss = loss_fn()
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalFailureError(f"loss is not finite: {value}")
        loss.backward()
        grads = {
            name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()
        }
        return value, grads
    finally:
        for name, p in params.items():
            p.requires_grad = previous[name]
            p.grad = None


def central_difference(
    loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5
) -> dict[str, np.ndarray]:
    """Finite-difference gradients, (f(p+eps) - f(p-eps)) / (2 eps) per entry.

    Only evaluates the forward pass, so it is independent of the tape and
    serves as the oracle for ``value_and_grad``.
    """
    grads: dict[str, np.ndarray] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = loss_fn().item()
            flat[i] = original - eps
            minus = loss_fn().item()
            flat[i] = original
            grad[i] = (plus - minus) / (2.0 * eps)
        grads[name] = grad.reshape(p.data.shape)
    return grads
