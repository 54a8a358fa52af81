"""Adam with bias correction and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeMismatch, Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray | None],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Update ``params`` in place. A missing grad counts as zero."""
    if len(params) != len(grads):
        raise ShapeMismatch("adam_step", (len(params),), (len(grads),))
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeMismatch("adam_step", p.shape, g.shape)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale grads so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None)))
    if total > max_norm > 0:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return total


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.betas[0],
            self.betas[1],
            self.eps,
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.state.step], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(arrays["step"][0])
        n = len(self.params)
        if "m.0" in arrays:
            self.state.m = [arrays[f"m.{i}"].astype(self.params[i].dtype) for i in range(n)]
            self.state.v = [arrays[f"v.{i}"].astype(self.params[i].dtype) for i in range(n)]
