"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each :class:`Tensor` remembers the tensors it was computed from and a
closure that pushes its gradient back to them.  ``backward`` walks the
graph once in reverse topological order and then releases it.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_ufunc__ = None  # make numpy defer to Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    # ----------------------------------------------------------- plumbing
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad.

        Only scalar tensors can start a backward pass.  Intermediate grads
        and graph edges are dropped afterwards.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar tensor, got shape {self.shape}")
        if not self.requires_grad:
            return
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

    # -------------------------------------------------------- arithmetic
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data
        return Tensor._make(
            out,
            (a, b),
            lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        )

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul supports 2-D operands only")
        return Tensor._make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))

    def __pow__(self, exponent) -> "Tensor":
        if isinstance(exponent, Tensor):
            return power(self, exponent)
        e = float(exponent)
        a = self
        return Tensor._make(a.data**e, (a,), lambda g: (g * e * a.data ** (e - 1.0),))

    # --------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape),)

        return Tensor._make(out, (a,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # ------------------------------------------------------------ shaping
    def __getitem__(self, index) -> "Tensor":
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(a.data[index], (a,), back)

    def reshape(self, *shape) -> "Tensor":
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    @property
    def T(self) -> "Tensor":
        a = self
        return Tensor._make(a.data.T, (a,), lambda g: (g.T,))

    # -------------------------------------------------- elementwise maths
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,))

    def softplus(self) -> "Tensor":
        a = self
        return Tensor._make(_softplus(a.data), (a,), lambda g: (g * _stable_sigmoid(a.data),))

    def sigmoid(self) -> "Tensor":
        out = _stable_sigmoid(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=True, name=name)


def power(base: Tensor, exponent: Tensor) -> Tensor:
    """Elementwise ``base ** exponent`` for strictly positive ``base``.

    ``exponent`` may be a tensor (it is broadcast), so it can be learned.
    """
    base, exponent = as_tensor(base), as_tensor(exponent)
    out = base.data**exponent.data

    def back(g):
        gb = g * exponent.data * base.data ** (exponent.data - 1.0)
        ge = g * out * np.log(base.data)
        return (_unbroadcast(gb, base.shape), _unbroadcast(ge, exponent.shape))

    return Tensor._make(out, (base, exponent), back)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(out, tensors, back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, tensors, back)


def segment_mean(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Row-wise mean of ``x`` (n, c) grouped by integer ``segments`` (n,).

    Summation runs in a fixed order (``np.add.at`` over rows), so results
    are reproducible bit-for-bit.
    """
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=num_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ValueError("every segment needs at least one row")
    acc = np.zeros((num_segments, x.shape[1]))
    np.add.at(acc, segments, x.data)
    out = acc / counts[:, None]

    def back(g):
        return ((g / counts[:, None])[segments],)

    return Tensor._make(out, (x,), back)


def pairwise_distances(z: Tensor) -> Tensor:
    """Euclidean distance matrix between the rows of ``z`` (n, m).

    The diagonal is exactly zero and passes no gradient; coincident
    off-diagonal rows also pass none (the norm is not differentiable there).
    """
    diff = z.data[:, None, :] - z.data[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0, g / dist, 0.0)
        w = w + w.T
        # d/dz_i sum_j w_ij ||z_i - z_j|| with symmetric w
        return (w.sum(axis=1)[:, None] * z.data - w @ z.data,)

    return Tensor._make(dist, (z,), back)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
