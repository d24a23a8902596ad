"""Dense tensors with a tape-based reverse-mode gradient graph.

Operations record a node on the active :class:`Graph` whenever at least one
input is tracked (a leaf with ``requires_grad`` or the output of a recorded
node). Nodes are appended in execution order, so the tape order is a valid
topological order and backward is a single reverse sweep.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_active_graph: contextvars.ContextVar["Graph | None"] = contextvars.ContextVar(
    "active_graph", default=None
)
_debug: contextvars.ContextVar[bool] = contextvars.ContextVar("debug", default=False)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or inf."""


class debug_mode:
    """Context manager that checks every op output for finiteness."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._token = None

    def __enter__(self):
        self._token = _debug.set(self.enabled)
        return self

    def __exit__(self, *exc):
        _debug.reset(self._token)


class Tensor:
    """An n-d array that may participate in the active gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: tuple[Graph, int] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # arithmetic sugar
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
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


@dataclass
class Graph:
    """Append-only tape of recorded operations.

    Use as a context manager; ops executed inside the block are recorded
    here. Outside any graph, ops run without recording.
    """

    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self._tokens: list = []

    def __enter__(self) -> "Graph":
        self._tokens.append(_active_graph.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_graph.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def release(self) -> None:
        """Drop the tape and detach recorded outputs from it.

        Tensors and the tape reference each other, so without this a finished
        graph lingers until the cyclic collector happens to run.
        """
        for node in self.nodes:
            node.out.node = None
        self.nodes.clear()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
        out.node = (self, len(self.nodes))
        self.nodes.append(Node(out, inputs, backward))
        return out

    def _index(self, t: Tensor) -> int | None:
        if t.node is None:
            return None
        if t.node[0] is not self:
            raise ValueError("tensor belongs to a different graph")
        return t.node[1]

    def grad(
        self,
        loss: Tensor,
        wrt: Sequence[Tensor],
        seed: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Gradients of ``loss`` with respect to each tensor in ``wrt``.

        Only nodes downstream of ``wrt`` are visited and only the input
        gradients on those paths are computed. Leaf ``.grad`` is untouched.
        """
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        targets = {id(t) for t in wrt}
        grads = self._sweep(loss, targets, seed, wrt)
        out = []
        for t in wrt:
            g = grads.get(id(t))
            out.append(np.zeros_like(t.data) if g is None else g)
        return out

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients of ``loss`` into ``.grad`` of every tracked leaf."""
        if seed is None:
            if loss.size != 1:
                raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and t.node is None:
                    leaves[id(t)] = t
        if loss.requires_grad and loss.node is None:
            leaves[id(loss)] = loss
        grads = self._sweep(loss, set(leaves), seed, list(leaves.values()))
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    def _sweep(self, loss, targets: set[int], seed, wrt) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {}
        if id(loss) in targets:
            grads[id(loss)] = np.asarray(seed, dtype=loss.dtype).reshape(loss.shape)
        end = self._index(loss)
        if end is None:
            return grads
        # forward reachability: which tensors depend on a target
        start = end + 1
        for t in wrt:
            idx = self._index(t)
            start = min(start, 0 if idx is None else idx)
        live = set(targets)
        needs: dict[int, tuple[bool, ...]] = {}
        for i in range(start, end + 1):
            node = self.nodes[i]
            flags = tuple(id(t) in live for t in node.inputs)
            if any(flags):
                live.add(id(node.out))
                needs[i] = flags
        if id(loss) not in live:
            return grads
        grads[id(loss)] = np.asarray(seed, dtype=loss.dtype).reshape(loss.shape)
        for i in range(end, start - 1, -1):
            flags = needs.get(i)
            if flags is None:
                continue
            node = self.nodes[i]
            g = grads.pop(id(node.out), None) if id(node.out) not in targets else grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g, flags)
            for t, flag, gi in zip(node.inputs, flags, in_grads):
                if not flag or gi is None:
                    continue
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        return grads


class untracked:
    """Context manager that runs ops without recording them."""

    def __enter__(self):
        self._token = _active_graph.set(None)

    def __exit__(self, *exc):
        _active_graph.reset(self._token)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _finish(data: np.ndarray, inputs: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    if _debug.get() and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by op")
    out = Tensor(data)
    graph = _active_graph.get()
    if graph is not None and any(t.tracked for t in inputs):
        graph.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _finish(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _finish(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _finish(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g, needs):
        ga = _unbroadcast(g / b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None
        return ga, gb

    return _finish(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _finish(-a.data, (a,), lambda g, needs: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _finish(out, (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _finish(np.log(a.data), (a,), lambda g, needs: (g / a.data,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _finish(a.data * a.data, (a,), lambda g, needs: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _finish(out, (a,), lambda g, needs: (0.5 * g / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _finish(out, (a,), lambda g, needs: (g * (1.0 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _finish(out, (a,), lambda g, needs: (g * out * (1.0 - out),))


def elu(a) -> Tensor:
    a = as_tensor(a)
    neg_part = np.expm1(np.minimum(a.data, 0.0))
    pos = a.data > 0
    out = np.where(pos, a.data, neg_part)

    def backward(g, needs):
        return (np.where(pos, g, g * (neg_part + 1.0)),)

    return _finish(out, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return _finish(out, (a,), lambda g, needs: (g * _sigmoid_np(a.data),))


def stop_gradient(a) -> Tensor:
    """Identity in the forward pass; contributes nothing upstream."""
    a = as_tensor(a)
    return Tensor(a.data)


# ------------------------------------------------------------- shape / reduce

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _finish(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(src),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = tuple(np.argsort(axes))
    return _finish(a.data.transpose(axes), (a,), lambda g, needs: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _finish(np.broadcast_to(a.data, shape), (a,), lambda g, needs: (_unbroadcast(g, src),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def backward(g, needs):
        full = np.zeros_like(a.data)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _finish(a.data[index], (a,), backward)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g, needs):
        out = []
        for i, flag in enumerate(needs):
            if not flag:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return out

    return _finish(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)

    def backward(g, needs):
        return [np.take(g, i, axis=axis) if flag else None for i, flag in enumerate(needs)]

    return _finish(np.stack([t.data for t in ts], axis=axis), ts, backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def backward(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _finish(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _finish(a.data @ b.data, (a, b), backward)


# ------------------------------------------------------ normalisation & stats

def _sorted_sum(x: np.ndarray, axis: int, keepdims: bool) -> np.ndarray:
    # summing in sorted order makes the result independent of input order
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


def softmax(a, axis: int = -1, order_invariant: bool = False) -> Tensor:
    """Softmax with max subtraction.

    With ``order_invariant`` the normaliser is summed in sorted order, so
    permuting entries along ``axis`` permutes the output bitwise.
    """
    a = as_tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    total = _sorted_sum(e, axis, True) if order_invariant else e.sum(axis=axis, keepdims=True)
    out = e / total

    def backward(g, needs):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _finish(out, (a,), backward)


def log_softmax(a, axis: int = -1, order_invariant: bool = False) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    total = _sorted_sum(e, axis, True) if order_invariant else e.sum(axis=axis, keepdims=True)
    out = shifted - np.log(total)

    def backward(g, needs):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _finish(out, (a,), backward)


def logsumexp(a, axis: int = -1, keepdims: bool = False, order_invariant: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.data - m)
    total = _sorted_sum(e, axis, True) if order_invariant else e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = np.log(total) + m

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axis)
        with np.errstate(invalid="ignore"):
            w = np.exp(a.data - out_k)
        return (g * np.nan_to_num(w),)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return _finish(out, (a,), backward)


def layernorm(a, axis=-1, eps: float = 1e-5) -> Tensor:
    """Standardise over ``axis`` (int or tuple); no learned affine."""
    a = as_tensor(a)
    axes = tuple(np.atleast_1d(axis).tolist())
    n = int(np.prod([a.shape[i] for i in axes]))
    if n < 2:
        raise ShapeError("layernorm needs at least two elements per slice")
    mu = a.data.mean(axis=axes, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def backward(g, needs):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * out).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return _finish(out, (a,), backward)


# ------------------------------------------------------------ probabilistic

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_logpdf(x, mean, sigma: float) -> Tensor:
    """Elementwise log N(x; mean, sigma^2) with a fixed scalar sigma."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x, mean = _pair(x, mean)
    inv_var = 1.0 / (sigma * sigma)
    diff = x.data - mean.data
    const = -0.5 * LOG_2PI - float(np.log(sigma))
    out = -0.5 * inv_var * diff * diff + const

    def backward(g, needs):
        gd = g * diff * inv_var
        return (_unbroadcast(-gd, x.shape) if needs[0] else None,
                _unbroadcast(gd, mean.shape) if needs[1] else None)

    return _finish(out, (x, mean), backward)


def reparam_sample(mean, sigma, rng: np.random.Generator) -> Tensor:
    """mean + sigma * eps with eps ~ N(0, 1) drawn from ``rng``."""
    mean, sigma = _pair(mean, sigma)
    shape = np.broadcast_shapes(mean.shape, sigma.shape)
    eps = rng.standard_normal(shape).astype(mean.dtype)
    return add(mean, mul(sigma, eps))
