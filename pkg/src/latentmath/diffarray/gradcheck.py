"""Central finite-difference gradient oracle evaluated in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn(*[Tensor(x, dtype=np.float64) for x in arrays]).item()
            flat[i] = old - h
            down = fn(*[Tensor(x, dtype=np.float64) for x in arrays]).item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True, dtype=np.float64) for a in arrays]
    backward(fn(*leaves))
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]


def max_relative_error(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> float:
    """Norm-wise relative error per input, maximised over inputs."""
    worst = 0.0
    for a, n in zip(analytic_grads(fn, arrays), numeric_grads(fn, arrays, h)):
        denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - n) / denom))
    return worst
