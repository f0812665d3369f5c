"""Minimal reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps a float64 array and records a backward closure; calling
``backward()`` on a scalar walks the graph in reverse topological order.
The op set is exactly what the approximator needs: broadcasting add/mul,
batched matmul, exp/log/tanh/pow, axis reductions, row gathers for
embeddings and label lookups, reshape/swapaxes, and a detached max for
stable softmax.  Everything is double precision; gradients are exact up to
floating-point rounding and are checked against central finite differences
in the test suite.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / FD probes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, grad={self.requires_grad})"

    # graph plumbing -----------------------------------------------------

    def _make(self, data: np.ndarray, parents: Iterable["Tensor"],
              backward: Callable[[np.ndarray], None]) -> "Tensor":
        parents = tuple(p for p in parents if p.requires_grad)
        out = Tensor(data, requires_grad=bool(parents) and _GRAD_ENABLED)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        return out

    def _accum(self, grad: np.ndarray):
        if self.grad is None:
            # copy: incoming grads may be views (reshape/swapaxes backward)
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # ops ----------------------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._wrap(other)
        a, b = self, other
        out_data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return self._make(out_data, (a, b), bw)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bw(g):
            a._accum(-g)

        return self._make(-a.data, (a,), bw)

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        other = self._wrap(other)
        a, b = self, other
        out_data = a.data * b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return self._make(out_data, (a, b), bw)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = self._wrap(other)
        a, b = self, other
        out_data = a.data @ b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

        return self._make(out_data, (a, b), bw)

    def pow_const(self, c: float) -> "Tensor":
        a = self
        out_data = a.data ** c

        def bw(g):
            a._accum(g * c * a.data ** (c - 1.0))

        return self._make(out_data, (a,), bw)

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)

        def bw(g):
            a._accum(g * out_data)

        return self._make(out_data, (a,), bw)

    def log(self) -> "Tensor":
        a = self
        out_data = np.log(a.data)

        def bw(g):
            a._accum(g / a.data)

        return self._make(out_data, (a,), bw)

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)

        def bw(g):
            a._accum(g * (1.0 - out_data ** 2))

        return self._make(out_data, (a,), bw)

    def gelu(self) -> "Tensor":
        """Fused tanh-approximation GELU (hot path; one intermediate kept)."""
        a = self
        x = a.data
        c = 0.7978845608028654  # sqrt(2 / pi)
        inner = np.tanh(c * (x + 0.044715 * x * x * x))
        out_data = 0.5 * x * (1.0 + inner)

        def bw(g):
            dinner = (1.0 - inner * inner) * c * (1.0 + 3 * 0.044715 * x * x)
            a._accum(g * (0.5 * (1.0 + inner) + 0.5 * x * dinner))

        return self._make(out_data, (a,), bw)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())

        return self._make(out_data, (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        a = self
        out_data = a.data.reshape(*shape)

        def bw(g):
            a._accum(g.reshape(a.data.shape))

        return self._make(out_data, (a,), bw)

    def swapaxes(self, ax1: int, ax2: int) -> "Tensor":
        a = self
        out_data = np.swapaxes(a.data, ax1, ax2)

        def bw(g):
            a._accum(np.swapaxes(g, ax1, ax2))

        return self._make(out_data, (a,), bw)

    def take_rows(self, idx: np.ndarray) -> "Tensor":
        """Row gather ``self[idx]`` (embedding lookup); scatter-adds on backward."""
        a = self
        idx = np.asarray(idx, dtype=np.int64)
        out_data = a.data[idx]

        def bw(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accum(acc)

        return self._make(out_data, (a,), bw)

    def take_cols(self, idx: np.ndarray) -> "Tensor":
        """Column gather ``self[:, idx]``; idx may be multi-dimensional."""
        a = self
        idx = np.asarray(idx, dtype=np.int64)
        out_data = a.data[:, idx]

        def bw(g):
            acc = np.zeros_like(a.data)
            np.add.at(acc, (slice(None), idx), g)
            a._accum(acc)

        return self._make(out_data, (a,), bw)

    def gather_last(self, idx: np.ndarray) -> "Tensor":
        """Pick one entry along the last axis per leading index."""
        a = self
        idx = np.asarray(idx, dtype=np.int64)
        out_data = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

        def bw(g):
            acc = np.zeros_like(a.data)
            np.put_along_axis(acc, idx[..., None], g[..., None], axis=-1)
            a._accum(acc)

        return self._make(out_data, (a,), bw)

    def max_detached(self, axis=None, keepdims: bool = False) -> np.ndarray:
        """Max as a constant (no gradient); exact for softmax shifting."""
        return self.data.max(axis=axis, keepdims=keepdims)


# composed layers ---------------------------------------------------------


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - Tensor(x.max_detached(axis=axis, keepdims=True))
    return shifted - shifted.exp().sum(axis=axis, keepdims=True).log()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis=axis).exp()


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU (delegates to the fused primitive)."""
    return x.gelu()


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply (possibly modulated) scale/shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    xhat = centered * (var + eps).pow_const(-0.5)
    return xhat * gamma + beta


def gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Backward pass returning one gradient array per trainable parameter."""
    for p in params.values():
        p.grad = None
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
        if p.requires_grad
    }


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    n_coords: int = 64,
    h: float = 1e-4,
    seed: int = 0,
) -> dict[str, float]:
    """Max relative error of autodiff gradients vs central finite differences.

    Samples up to ``n_coords`` coordinates per parameter tensor.  Relative
    error uses the guarded denominator ``max(|ad|, |fd|)`` when either side
    exceeds 1e-6, else the absolute difference is compared to 1e-8 (both
    sides numerically zero).
    """
    grads = gradients(loss_fn(), params)
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        size = flat.size
        coords = rng.choice(size, size=min(n_coords, size), replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            with no_grad():
                f_plus = float(loss_fn().data)
            flat[c] = orig - h
            with no_grad():
                f_minus = float(loss_fn().data)
            flat[c] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            ad = float(grads[name].reshape(-1)[c])
            denom = max(abs(ad), abs(fd))
            if denom > 1e-6:
                err = abs(ad - fd) / denom
            else:
                err = 0.0 if abs(ad - fd) < 1e-8 else 1.0
            worst = max(worst, err)
        report[name] = worst
    return report
