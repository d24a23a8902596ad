"""Parameter storage, global-norm clipping and Adam."""

from __future__ import annotations

from collections.abc import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Named trainable tensors plus per-parameter Adam moments."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m1: dict[str, np.ndarray] = {}
        self.m2: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        self.m1[name] = np.zeros_like(t.data)
        self.m2[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.params.items()
        }

    def astype(self, dtype) -> "ParamStore":
        """Copy with every parameter and moment cast to ``dtype``."""
        other = ParamStore(dtype)
        for name, t in self.params.items():
            other.add(name, t.data)
            other.m1[name] = self.m1[name].astype(dtype)
            other.m2[name] = self.m2[name].astype(dtype)
        other.step = self.step
        return other

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the scale that was applied (1.0 when untouched).
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for name in grads:
        grads[name] = (grads[name] * scale).astype(grads[name].dtype, copy=False)
    return scale


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update applied in place."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, param in store.params.items():
        g = grads[name]
        m1 = store.m1[name]
        m2 = store.m2[name]
        m1 *= beta1
        m1 += (1.0 - beta1) * g
        m2 *= beta2
        m2 += (1.0 - beta2) * g * g
        update = lr * (m1 / c1) / (np.sqrt(m2 / c2) + eps)
        param.data = (param.data - update).astype(store.dtype, copy=False)
