"""Expression and operation encoders."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from ..diffarray import ShapeMismatch, Tensor
from ..diffarray import functional as F
from ..expr import Expr, serialize_latex
from ..ops import OPERATIONS, OperationKind
from .optree import OperationTree, build_operation_tree
from .tokenizer import PAD_ID, TokenVocabulary

FAMILIES = ("gcn", "graphsage", "cnn", "lstm", "transformer", "bag")
GRAPH_FAMILIES = ("gcn", "graphsage")


class EmptyInput(ValueError):
    pass


@dataclass
class EncoderConfig:
    family: str = "lstm"
    dim: int = 64
    layers: int | None = None
    heads: int = 8
    filters: tuple[tuple[int, int], ...] = ((3, 100), (4, 100), (5, 100))
    ff_mult: int = 2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown encoder family {self.family!r}")
        if self.layers is None:
            self.layers = {"gcn": 6, "graphsage": 6, "lstm": 2, "transformer": 6}.get(self.family, 1)
        if self.dim <= 0 or self.layers <= 0 or self.heads <= 0:
            raise ValueError("encoder sizes must be positive")
        if self.family == "transformer" and self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        self.filters = tuple((int(w), int(c)) for w, c in self.filters)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape or (fan_in, fan_out)).astype(np.float32), requires_grad=True)


def embedding_table(rng: np.random.Generator, rows: int, dim: int, padding_idx: int | None = PAD_ID) -> Tensor:
    table = rng.normal(0.0, 0.02, size=(rows, dim)).astype(np.float32)
    if padding_idx is not None:
        table[padding_idx] = 0
    return Tensor(table, requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, np.float32), requires_grad=True)


class Module:
    """Holds named parameters; subclasses fill ``self.params`` in order."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            if state[k].shape != p.shape:
                raise ShapeMismatch(f"load {k}", p.shape, state[k].shape)
            p.data = np.array(state[k], dtype=np.float32)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return F.add(F.matmul(x, w), b)


# ---------------------------------------------------------------------------
# Expression encoders
# ---------------------------------------------------------------------------


class ExpressionEncoder(Module):
    """Maps expressions to d-dimensional vectors. Featurisation is cached per expression."""

    kind = "sequence"

    def __init__(self, cfg: EncoderConfig, vocab: TokenVocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self._cache: dict[Expr, object] = {}

    @property
    def dim(self) -> int:
        return self.cfg.dim

    def featurize(self, e: Expr):
        feat = self._cache.get(e)
        if feat is None:
            feat = self._featurize(e)
            self._cache[e] = feat
        return feat

    def _featurize(self, e: Expr):
        return self.vocab.encode(serialize_latex(e))

    def encode(self, exprs: Sequence[Expr]) -> Tensor:
        return self.encode_features([self.featurize(e) for e in exprs])

    def encode_features(self, feats: Sequence) -> Tensor:
        if not feats or any(len(f) == 0 for f in feats):
            raise EmptyInput("cannot encode an empty input")
        return self._forward(feats)

    def _forward(self, feats) -> Tensor:
        raise NotImplementedError


def _content_length(seq: Sequence[int]) -> int:
    n = len(seq)
    while n and seq[n - 1] == PAD_ID:
        n -= 1
    return n


def pad_batch(seqs: Sequence[Sequence[int]], min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a matrix; lengths ignore trailing PAD ids."""
    lengths = np.array([_content_length(s) for s in seqs], dtype=np.int64)
    if not lengths.all():
        raise EmptyInput("sequence holds only padding")
    L = max(int(lengths.max()), min_len)
    ids = np.full((len(seqs), L), PAD_ID, dtype=np.int64)
    for i, (s, n) in enumerate(zip(seqs, lengths)):
        ids[i, :n] = s[:n]
    return ids, lengths


class BagEncoder(ExpressionEncoder):
    def __init__(self, cfg, vocab, rng):
        super().__init__(cfg, vocab)
        d = cfg.dim
        self.params = {"emb": embedding_table(rng, len(vocab), d), "out.w": glorot(rng, d, d), "out.b": zeros(d)}

    def _forward(self, feats):
        ids, lengths = pad_batch(feats)
        x = F.embedding_lookup(self.params["emb"], ids, padding_idx=PAD_ID)
        mask = np.arange(ids.shape[1])[None, :] < lengths[:, None]
        return linear(F.mean_over_axis(x, 1, mask), self.params["out.w"], self.params["out.b"])


class CNNEncoder(ExpressionEncoder):
    def __init__(self, cfg, vocab, rng):
        super().__init__(cfg, vocab)
        d = cfg.dim
        self.params = {"emb": embedding_table(rng, len(vocab), d)}
        total = 0
        for w, c in cfg.filters:
            self.params[f"conv{w}.k"] = glorot(rng, w * d, c, shape=(w, d, c))
            self.params[f"conv{w}.b"] = zeros(c)
            total += c
        self.params["out.w"] = glorot(rng, total, d)
        self.params["out.b"] = zeros(d)

    def _forward(self, feats):
        widest = max(w for w, _ in self.cfg.filters)
        ids, lengths = pad_batch(feats, min_len=widest)
        # short sequences count as padded up to the widest filter
        eff = np.maximum(lengths, widest)
        x = F.embedding_lookup(self.params["emb"], ids, padding_idx=PAD_ID)
        pooled = []
        for w, _ in self.cfg.filters:
            h = F.relu(F.conv1d(x, self.params[f"conv{w}.k"], self.params[f"conv{w}.b"]))
            valid = np.arange(h.shape[1])[None, :] <= (eff - w)[:, None]
            pooled.append(F.max_over_time(h, valid))
        return linear(F.concat(pooled, axis=1), self.params["out.w"], self.params["out.b"])


class LSTMEncoder(ExpressionEncoder):
    def __init__(self, cfg, vocab, rng):
        super().__init__(cfg, vocab)
        d = cfg.dim
        self.params = {"emb": embedding_table(rng, len(vocab), d)}
        for k in range(cfg.layers):
            self.params[f"lstm{k}.w_ih"] = glorot(rng, d, 4 * d)
            self.params[f"lstm{k}.w_hh"] = glorot(rng, d, 4 * d)
            bias = np.zeros(4 * d, np.float32)
            bias[d : 2 * d] = 1.0  # forget gate
            self.params[f"lstm{k}.b"] = Tensor(bias, requires_grad=True)
        self.params["out.w"] = glorot(rng, d, d)
        self.params["out.b"] = zeros(d)

    def _forward(self, feats):
        ids, lengths = pad_batch(feats)
        h = F.embedding_lookup(self.params["emb"], ids, padding_idx=PAD_ID)
        for k in range(self.cfg.layers):
            p = self.params
            h = F.lstm_layer(h, lengths, p[f"lstm{k}.w_ih"], p[f"lstm{k}.w_hh"], p[f"lstm{k}.b"])
        last = F.index(h, (np.arange(len(feats)), lengths - 1))
        return linear(last, self.params["out.w"], self.params["out.b"])


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(np.float32)


class TransformerEncoder(ExpressionEncoder):
    def __init__(self, cfg, vocab, rng):
        super().__init__(cfg, vocab)
        d, ff = cfg.dim, cfg.dim * cfg.ff_mult
        self.params = {"emb": embedding_table(rng, len(vocab), d)}
        for k in range(cfg.layers):
            for name in ("q", "k", "v", "o"):
                self.params[f"blk{k}.{name}.w"] = glorot(rng, d, d)
                self.params[f"blk{k}.{name}.b"] = zeros(d)
            self.params[f"blk{k}.ln1.g"] = Tensor(np.ones(d, np.float32), requires_grad=True)
            self.params[f"blk{k}.ln1.b"] = zeros(d)
            self.params[f"blk{k}.ff1.w"] = glorot(rng, d, ff)
            self.params[f"blk{k}.ff1.b"] = zeros(ff)
            self.params[f"blk{k}.ff2.w"] = glorot(rng, ff, d)
            self.params[f"blk{k}.ff2.b"] = zeros(d)
            self.params[f"blk{k}.ln2.g"] = Tensor(np.ones(d, np.float32), requires_grad=True)
            self.params[f"blk{k}.ln2.b"] = zeros(d)
        self.params["out.w"] = glorot(rng, d, d)
        self.params["out.b"] = zeros(d)

    def _heads(self, x: Tensor, B: int, L: int) -> Tensor:
        h = self.cfg.heads
        return F.transpose(F.reshape(x, (B, L, h, self.cfg.dim // h)), (0, 2, 1, 3))

    def _forward(self, feats):
        ids, lengths = pad_batch(feats)
        B, L = ids.shape
        d, h = self.cfg.dim, self.cfg.heads
        mask = np.arange(L)[None, :] < lengths[:, None]
        key_bias = Tensor(np.where(mask, 0.0, -1e9).astype(np.float32)[:, None, None, :])
        x = F.scale(F.embedding_lookup(self.params["emb"], ids, padding_idx=PAD_ID), math.sqrt(d))
        x = F.add(x, Tensor(sinusoidal_positions(L, d)))
        p = self.params
        for k in range(self.cfg.layers):
            q = self._heads(linear(x, p[f"blk{k}.q.w"], p[f"blk{k}.q.b"]), B, L)
            kk = self._heads(linear(x, p[f"blk{k}.k.w"], p[f"blk{k}.k.b"]), B, L)
            v = self._heads(linear(x, p[f"blk{k}.v.w"], p[f"blk{k}.v.b"]), B, L)
            scores = F.scale(F.matmul(q, F.transpose(kk, (0, 1, 3, 2))), 1.0 / math.sqrt(d // h))
            attn = F.softmax(F.add(scores, key_bias), axis=-1)
            ctx = F.reshape(F.transpose(F.matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
            x = F.layer_norm(F.add(x, linear(ctx, p[f"blk{k}.o.w"], p[f"blk{k}.o.b"])), p[f"blk{k}.ln1.g"], p[f"blk{k}.ln1.b"])
            ff = linear(F.relu(linear(x, p[f"blk{k}.ff1.w"], p[f"blk{k}.ff1.b"])), p[f"blk{k}.ff2.w"], p[f"blk{k}.ff2.b"])
            x = F.layer_norm(F.add(x, ff), p[f"blk{k}.ln2.g"], p[f"blk{k}.ln2.b"])
        return linear(F.mean_over_axis(x, 1, mask), p["out.w"], p["out.b"])


def _batch_graph(trees: Sequence[OperationTree], label_index) -> tuple[np.ndarray, sp.csr_matrix, sp.csr_matrix]:
    """Disjoint union: node label ids, undirected adjacency (no self loops), mean-pool matrix."""
    ids, rows, cols, owner = [], [], [], []
    offset = 0
    for g, tree in enumerate(trees):
        ids.extend(label_index(tree.labels))
        for a, b in tree.edges:
            rows += [a + offset, b + offset]
            cols += [b + offset, a + offset]
        owner += [g] * len(tree)
        offset += len(tree)
    n = offset
    adj = sp.csr_matrix((np.ones(len(rows), np.float32), (rows, cols)), shape=(n, n))
    counts = np.bincount(owner, minlength=len(trees)).astype(np.float32)
    pool = sp.csr_matrix((1.0 / counts[owner], (owner, np.arange(n))), shape=(len(trees), n))
    return np.array(ids, dtype=np.int64), adj, pool


class GraphEncoder(ExpressionEncoder):
    kind = "graph"

    def __init__(self, cfg, vocab, rng):
        super().__init__(cfg, vocab)
        d = cfg.dim
        self.params = {"emb": embedding_table(rng, len(vocab), d, padding_idx=None)}
        fan_in = d if cfg.family == "gcn" else 2 * d
        for k in range(cfg.layers):
            self.params[f"layer{k}.w"] = glorot(rng, fan_in, d)
            self.params[f"layer{k}.b"] = zeros(d)
        self.params["out.w"] = glorot(rng, d, d)
        self.params["out.b"] = zeros(d)

    def _featurize(self, e):
        return build_operation_tree(e)

    def _labels(self, labels):
        return [self.vocab.index.get(t, 1) for t in labels]

    def _forward(self, trees):
        ids, adj, pool = _batch_graph(trees, self._labels)
        n = adj.shape[0]
        if self.cfg.family == "gcn":
            a = adj + sp.identity(n, dtype=np.float32, format="csr")
            dinv = 1.0 / np.sqrt(np.asarray(a.sum(axis=1)).ravel())
            prop = sp.diags(dinv) @ a @ sp.diags(dinv)
        else:
            deg = np.asarray(adj.sum(axis=1)).ravel()
            prop = sp.diags(np.where(deg > 0, 1.0 / np.maximum(deg, 1), 0.0)) @ adj
        prop = sp.csr_matrix(prop, dtype=np.float32)
        h = F.embedding_lookup(self.params["emb"], ids)
        for k in range(self.cfg.layers):
            w, b = self.params[f"layer{k}.w"], self.params[f"layer{k}.b"]
            if self.cfg.family == "gcn":
                h = F.relu(linear(F.spmm(prop, h), w, b))
            else:
                h = F.relu(linear(F.concat([F.spmm(prop, h), h], axis=1), w, b))
        return linear(F.spmm(pool, h), self.params["out.w"], self.params["out.b"])


_CLASSES = {
    "bag": BagEncoder,
    "cnn": CNNEncoder,
    "lstm": LSTMEncoder,
    "transformer": TransformerEncoder,
    "gcn": GraphEncoder,
    "graphsage": GraphEncoder,
}


def build_vocabulary(family: str, exprs: Sequence[Expr]) -> TokenVocabulary:
    """Token or node-label vocabulary from (training) expressions."""
    if family in GRAPH_FAMILIES:
        seen: set[str] = set()
        for e in exprs:
            seen.update(build_operation_tree(e).labels)
        return TokenVocabulary(sorted(seen))
    return TokenVocabulary.build(serialize_latex(e) for e in exprs)


def make_encoder(cfg: EncoderConfig, vocab: TokenVocabulary, seed: int = 0) -> ExpressionEncoder:
    rng = np.random.default_rng([seed, 1])
    return _CLASSES[cfg.family](cfg, vocab, rng)


def encode_expression(model: ExpressionEncoder, e: Expr) -> np.ndarray:
    return model.encode([e]).data[0]


# ---------------------------------------------------------------------------
# Operation encoder
# ---------------------------------------------------------------------------


class OperationEncoder(Module):
    def __init__(self, mode: str, dim: int, seed: int = 0):
        super().__init__()
        if mode not in ("one-hot", "dense"):
            raise ValueError(f"unknown operation encoding {mode!r}")
        self.mode = mode
        n = len(OPERATIONS)
        if mode == "one-hot":
            self.table = Tensor(np.eye(n, dtype=np.float32))
        else:
            self.table = embedding_table(np.random.default_rng([seed, 2]), n, dim, padding_idx=None)
            self.params = {"table": self.table}

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def encode(self, ops: Sequence[OperationKind]) -> Tensor:
        return F.embedding_lookup(self.table, np.array([int(t) for t in ops], dtype=np.int64))


def encode_operation(enc: OperationEncoder, t: OperationKind) -> np.ndarray:
    return enc.encode([t]).data[0]
