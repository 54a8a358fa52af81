"""Projection and translation heads over expression and operation embeddings."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .diffarray import ShapeMismatch, Tensor
from .diffarray import functional as F
from .encoders.models import Module, OperationEncoder, glorot, zeros
from .ops import OPERATIONS, OperationKind

PARADIGMS = ("projection-onehot", "projection-dense", "translation")


class ZeroVector(ValueError):
    pass


class ProjectionHead(Module):
    """e_y' = W [t ; e_x] + b, a single linear layer."""

    def __init__(self, dim: int, op_dim: int, seed: int = 0):
        super().__init__()
        self.dim, self.op_dim = dim, op_dim
        rng = np.random.default_rng([seed, 3])
        self.params = {"w": glorot(rng, op_dim + dim, dim), "b": zeros(dim)}

    def predict(self, e_x: Tensor, t: Tensor) -> Tensor:
        if e_x.shape[-1] != self.dim or t.shape[-1] != self.op_dim:
            raise ShapeMismatch("projection", (self.op_dim, self.dim), (t.shape[-1], e_x.shape[-1]))
        return F.add(F.matmul(F.concat([t, e_x], axis=-1), self.params["w"]), self.params["b"])


class TranslationHead(Module):
    """Per-operation diagonal scaling T_t and translation t (the dense operation rows)."""

    def __init__(self, dim: int, shared_diag: bool = False):
        super().__init__()
        self.dim = dim
        self.shared_diag = shared_diag
        rows = 1 if shared_diag else len(OPERATIONS)
        self.params = {"diag": Tensor(np.ones((rows, dim), np.float32), requires_grad=True)}

    def diag(self, ops: Sequence[OperationKind]) -> Tensor:
        idx = np.zeros(len(ops), np.int64) if self.shared_diag else np.array([int(t) for t in ops], np.int64)
        return F.embedding_lookup(self.params["diag"], idx)

    def shifted(self, e_x: Tensor, ops: Sequence[OperationKind]) -> Tensor:
        if e_x.shape[-1] != self.dim:
            raise ShapeMismatch("translation", (self.dim,), (e_x.shape[-1],))
        return F.mul(self.diag(ops), e_x)

    def resolved(self, e_x: Tensor, ops: Sequence[OperationKind], t: Tensor) -> Tensor:
        return F.sub(self.shifted(e_x, ops), t)


class Paradigm:
    """Operation encoder plus head; exposes the anchor/target pair each ranking rule compares."""

    def __init__(self, name: str, dim: int, seed: int = 0, shared_diag: bool = False):
        if name not in PARADIGMS:
            raise ValueError(f"unknown paradigm {name!r}")
        self.name = name
        self.dim = dim
        self.op_encoder = OperationEncoder("one-hot" if name == "projection-onehot" else "dense", dim, seed)
        if name == "translation":
            self.head: Module = TranslationHead(dim, shared_diag)
        else:
            self.head = ProjectionHead(dim, self.op_encoder.dim, seed)

    def parameters(self) -> list[Tensor]:
        return self.op_encoder.parameters() + self.head.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"op.{k}": v for k, v in self.op_encoder.state_dict().items()}
        out.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.op_encoder.load_state_dict({k[3:]: v for k, v in state.items() if k.startswith("op.")})
        self.head.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("head.")})

    def anchor(self, e_x: Tensor, ops: Sequence[OperationKind]) -> Tensor:
        """Vector compared against candidates: projection output, or T_t∘e_x."""
        t = self.op_encoder.encode(ops)
        if self.name == "translation":
            return self.head.shifted(e_x, ops)
        return self.head.predict(e_x, t)

    def target_shift(self, ops: Sequence[OperationKind]) -> Tensor | None:
        """Added to candidate embeddings before comparison (translation only)."""
        if self.name == "translation":
            return self.op_encoder.encode(ops)
        return None

    def next_premise(self, e_x: Tensor, ops: Sequence[OperationKind]) -> Tensor:
        """Stand-alone predicted conclusion embedding, used for propagation."""
        if self.name == "translation":
            return self.head.resolved(e_x, ops, self.op_encoder.encode(ops))
        return self.head.predict(e_x, self.op_encoder.encode(ops))


def cosine_matrix(anchor: np.ndarray, targets: np.ndarray) -> np.ndarray:
    a = anchor / np.maximum(np.linalg.norm(anchor, axis=-1, keepdims=True), 1e-12)
    b = targets / np.maximum(np.linalg.norm(targets, axis=-1, keepdims=True), 1e-12)
    return b @ a if a.ndim == 1 else a @ b.T


def score_value(cos: float | np.ndarray):
    """-(1 - cos)^2, monotone in cosine over [-1, 1]."""
    return -((1.0 - np.asarray(cos)) ** 2)


def score(paradigm: Paradigm, e_x: np.ndarray, t: OperationKind, e_y: np.ndarray) -> float:
    ex = Tensor(np.asarray(e_x, np.float32)[None, :])
    anchor = paradigm.anchor(ex, [t]).data[0]
    target = np.asarray(e_y, dtype=np.float64)
    shift = paradigm.target_shift([t])
    if shift is not None:
        target = target + shift.data[0]
    if not np.any(anchor) or not np.any(target):
        raise ZeroVector("score needs non-zero prediction and target")
    return float(score_value(cosine_matrix(anchor.astype(np.float64), target[None, :])[0]))


def propagate(paradigm: Paradigm, e_x0: np.ndarray, ops: Sequence[OperationKind]) -> list[np.ndarray]:
    if len(ops) > 6:
        raise ValueError("propagation is limited to 6 steps")
    out = [np.asarray(e_x0, np.float32)]
    for t in ops:
        out.append(paradigm.next_premise(Tensor(out[-1][None, :]), [t]).data[0])
    return out
