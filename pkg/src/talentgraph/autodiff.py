"""Minimal reverse-mode automatic differentiation over numpy arrays.

Everything is float64; each op records a closure that routes the upstream
gradient to its parents. ``Tensor.backward()`` runs the closures in reverse
topological order. Only the ops the graph models need are implemented.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import NumericError, TalentGraphError


class Tensor:
    """A float64 array plus the bookkeeping to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Backpropagate from this (scalar) tensor to every parameter."""
        if self.data.size != 1:
            raise TalentGraphError("backward() requires a scalar tensor")
        if self._backward is None and not self._parents:
            raise TalentGraphError("backward() called on a tensor with no recorded forward")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
        out.requires_grad = True
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(grad):
        a._accumulate(_unbroadcast(grad, a.data.shape))
        b._accumulate(_unbroadcast(grad, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(grad):
        a._accumulate(_unbroadcast(grad, a.data.shape))
        b._accumulate(_unbroadcast(-grad, b.data.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(grad):
        a._accumulate(_unbroadcast(grad * b.data, a.data.shape))
        b._accumulate(_unbroadcast(grad * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), backward)


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)

    def backward(grad):
        a._accumulate(grad * factor)

    return _make(a.data * factor, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(grad):
        a._accumulate(grad @ b.data.T)
        b._accumulate(a.data.T @ grad)

    return _make(a.data @ b.data, (a, b), backward)


def spmm(matrix: sp.csr_matrix, matrix_t: sp.csr_matrix, x: Tensor) -> Tensor:
    """Fixed sparse operator times dense tensor; gradients flow through x only."""
    x = _as_tensor(x)

    def backward(grad):
        x._accumulate(matrix_t @ grad)

    return _make(matrix @ x.data, (x,), backward)


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    x = _as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)

    def backward(grad):
        full = np.zeros_like(x.data)
        np.add.at(full, rows, grad)
        x._accumulate(full)

    return _make(x.data[rows], (x,), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]

    def backward(grad):
        start = 0
        for p, width in zip(parts, widths):
            p._accumulate(grad[:, start : start + width])
            start += width

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out_data = _sigmoid(x.data)

    def backward(grad):
        x._accumulate(grad * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.tanh(x.data)

    def backward(grad):
        x._accumulate(grad * (1.0 - out_data**2))

    return _make(out_data, (x,), backward)


def softplus(x) -> Tensor:
    x = _as_tensor(x)

    def backward(grad):
        x._accumulate(grad * _sigmoid(x.data))

    return _make(_softplus(x.data), (x,), backward)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    mask = np.where(x.data > 0.0, 1.0, slope)

    def backward(grad):
        x._accumulate(grad * mask)

    return _make(x.data * mask, (x,), backward)


def elu(x, alpha: float = 1.0) -> Tensor:
    x = _as_tensor(x)
    neg = alpha * np.expm1(np.minimum(x.data, 0.0))
    out_data = np.where(x.data > 0.0, x.data, neg)

    def backward(grad):
        x._accumulate(grad * np.where(x.data > 0.0, 1.0, neg + alpha))

    return _make(out_data, (x,), backward)


def tsum(x) -> Tensor:
    x = _as_tensor(x)

    def backward(grad):
        x._accumulate(np.full_like(x.data, float(grad)))

    return _make(np.array(x.data.sum()), (x,), backward)


def tmean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def backward(grad):
        x._accumulate(np.full_like(x.data, float(grad) / n))

    return _make(np.array(x.data.mean()), (x,), backward)


def bce_with_logits(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Elementwise binary cross-entropy from logits, numerically stable.

    ``targets`` (and optional per-element ``weights``) are constants; the
    result has the same shape as ``logits``.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    loss = _softplus(logits.data) - logits.data * targets
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        loss = loss * weights

    def backward(grad):
        local = _sigmoid(logits.data) - targets
        if weights is not None:
            local = local * weights
        logits._accumulate(grad * local)

    return _make(loss, (logits,), backward)


def check_finite(x: Tensor, where: str) -> Tensor:
    """Raise NumericError if the tensor holds NaN or Inf."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite values in {where}")
    return x


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "elu": elu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}
