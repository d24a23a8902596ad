"""Central finite-difference checks against backward-pass gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, ShapeError, Tensor


def numerical_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-6) -> np.ndarray:
    """(f(p + h) - f(p - h)) / 2h for every entry of ``param`` (in place, restored)."""
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().data)
        flat[i] = orig - h
        fm = float(f().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    with Graph() as g:
        out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar output, got {out.shape}")
    try:
        return g.grad(out, list(params))
    finally:
        g.release()


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    floor: float = 1e-6,
) -> float:
    """Maximum relative error between analytic and finite-difference gradients.

    ``f`` rebuilds the scalar output from the current contents of ``params``;
    params must be tracked (``requires_grad=True``). ``floor`` keeps entries
    with near-zero gradients from dominating the ratio.
    """
    analytic = analytic_grads(f, params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = numerical_grad(f, p, h)
        worst = max(worst, rel_error(ga, gn, floor))
    return worst
