"""Retrieval metrics and evaluation protocols.

``model`` arguments are duck-typed: anything with ``encoder`` (an
ExpressionEncoder), ``paradigm`` (heads.Paradigm) and ``embed(exprs)``
returning a float32 matrix works.
"""

from __future__ import annotations

import csv
import os
import random
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .datagen import EvalInstance, MultiStepChain
from .diffarray import Tensor, no_grad
from .heads import cosine_matrix
from .ops import OperationKind

MODES = ("cross-op", "intra-op")


class NoRelevant(ValueError):
    pass


class MissingCandidates(ValueError):
    pass


class DegenerateCovariance(ValueError):
    pass


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def rank(scores: Sequence[float]) -> list[int]:
    """Candidate indices by descending score; equal scores keep index order."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def average_precision(relevant: Sequence[bool]) -> float:
    """AP of a ranked list given relevance flags in rank order."""
    hits = 0
    total = 0.0
    for k, rel in enumerate(relevant, start=1):
        if rel:
            hits += 1
            total += hits / k
    if hits == 0:
        raise NoRelevant("ranked list has no relevant candidate")
    return total / hits


def hit_at_k(relevant: Sequence[bool], k: int) -> int:
    if k < 1:
        raise ValueError("k must be at least 1")
    return int(any(relevant[:k]))


@dataclass
class MetricReport:
    mode: str
    map: float
    hit1: float
    hit3: float
    n: int
    num_vars: int | None = None

    def row(self) -> dict:
        return {k: (round(v, 4) if isinstance(v, float) else v) for k, v in asdict(self).items()}


@dataclass
class SeparationReport:
    mode: str
    before: float
    after: float
    n: int


def _aggregate(mode: str, ranked: list[list[bool]], num_vars=None) -> MetricReport:
    if not ranked:
        return MetricReport(mode, float("nan"), float("nan"), float("nan"), 0, num_vars)
    ap = [average_precision(r) for r in ranked]
    h1 = [hit_at_k(r, 1) for r in ranked]
    h3 = [hit_at_k(r, 3) for r in ranked]
    return MetricReport(mode, 100 * float(np.mean(ap)), 100 * float(np.mean(h1)), 100 * float(np.mean(h3)), len(ranked), num_vars)


def random_baseline(n_pos: int = 4, n_total: int = 24, trials: int = 200_000, seed: int = 0) -> MetricReport:
    """Monte Carlo MAP/Hit@k of uniformly random rankings."""
    rng = np.random.default_rng(seed)
    rel = np.zeros((trials, n_total), bool)
    rel[:, :n_pos] = True
    rel = rng.permuted(rel, axis=1)
    ranks = np.arange(1, n_total + 1)
    precision = np.cumsum(rel, axis=1) / ranks
    ap = (precision * rel).sum(axis=1) / n_pos
    return MetricReport(
        "random",
        100 * float(ap.mean()),
        100 * float(rel[:, 0].mean()),
        100 * float(rel[:, :3].any(axis=1).mean()),
        trials,
    )


# ---------------------------------------------------------------------------
# Embedding helpers
# ---------------------------------------------------------------------------


def embed_unique(model, exprs: Iterable) -> dict:
    uniq = list(dict.fromkeys(exprs))
    mat = model.embed(uniq)
    return {e: mat[i] for i, e in enumerate(uniq)}


def _anchor_and_shift(model, e_x: np.ndarray, ops: Sequence[OperationKind]) -> tuple[np.ndarray, np.ndarray | None]:
    with no_grad():
        x = Tensor(np.asarray(e_x, np.float32))
        anchor = model.paradigm.anchor(x, ops).data
        shift = model.paradigm.target_shift(ops)
    return anchor.astype(np.float64), None if shift is None else shift.data.astype(np.float64)


def _candidate_order(instance_id: int, n: int, seed: int = 0) -> list[int]:
    # candidates are presented in a seeded order so list position carries no signal
    order = list(range(n))
    random.Random(f"{seed}:candidates:{instance_id}").shuffle(order)
    return order


def _ranked_relevance(anchor: np.ndarray, cands: np.ndarray, n_pos: int, order: list[int]) -> list[bool]:
    cos = cosine_matrix(anchor, cands[order])
    return [order[i] < n_pos for i in rank(cos.tolist())]


# ---------------------------------------------------------------------------
# Protocols
# ---------------------------------------------------------------------------


def retrieval_rankings(model, instances: Sequence[EvalInstance]) -> list[list[bool]]:
    if not instances:
        return []
    emb = embed_unique(model, (e for inst in instances for e in (inst.premise,) + inst.candidates))
    e_x = np.stack([emb[inst.premise] for inst in instances])
    anchors, shifts = _anchor_and_shift(model, e_x, [inst.operation for inst in instances])
    out = []
    for i, inst in enumerate(instances):
        cands = np.stack([emb[c] for c in inst.candidates]).astype(np.float64)
        if shifts is not None:
            cands = cands + shifts[i]
        out.append(_ranked_relevance(anchors[i], cands, len(inst.positives), _candidate_order(inst.instance_id, len(cands))))
    return out


def eval_retrieval(model, instances: Sequence[EvalInstance]) -> dict[str, MetricReport]:
    ordered = sorted(instances, key=lambda i: i.instance_id)
    ranked = retrieval_rankings(model, ordered)
    return {m: _aggregate(m, [r for r, inst in zip(ranked, ordered) if inst.mode == m]) for m in MODES}


def eval_length_generalisation(model, instances: Sequence[EvalInstance], groups=(2, 3, 4, 5)) -> list[MetricReport]:
    ordered = sorted(instances, key=lambda i: i.instance_id)
    ranked = retrieval_rankings(model, ordered)
    out = []
    for m in MODES:
        for k in groups:
            sel = [r for r, inst in zip(ranked, ordered) if inst.mode == m and inst.num_premise_vars == k]
            out.append(_aggregate(m, sel, num_vars=k))
    return out


def eval_multistep(model, chains: Sequence[MultiStepChain], max_steps: int = 6) -> list[dict]:
    """Hit@1 per step index, propagating premise embeddings latently."""
    for ch in chains:
        if len(ch.candidates) < len(ch.steps):
            raise MissingCandidates(f"chain {ch.chain_id} lacks candidates")
    chains = sorted(chains, key=lambda c: c.chain_id)
    emb = embed_unique(
        model,
        [ch.premise for ch in chains] + [e for ch in chains for c in ch.candidates for e in (c.positive,) + c.negatives],
    )
    current = {ch.chain_id: emb[ch.premise].astype(np.float32) for ch in chains}
    rows = []
    for k in range(max_steps):
        active = [ch for ch in chains if len(ch.steps) > k]
        if not active:
            break
        e_x = np.stack([current[ch.chain_id] for ch in active])
        ops = [ch.steps[k].operation for ch in active]
        anchors, shifts = _anchor_and_shift(model, e_x, ops)
        hits = []
        for i, ch in enumerate(active):
            cand = ch.candidates[k]
            cands = np.stack([emb[e] for e in (cand.positive,) + cand.negatives]).astype(np.float64)
            if shifts is not None:
                cands = cands + shifts[i]
            order = _candidate_order(ch.chain_id * 16 + k, len(cands), seed=1)
            hits.append(hit_at_k(_ranked_relevance(anchors[i], cands, 1, order), 1))
        with no_grad():
            nxt = model.paradigm.next_premise(Tensor(e_x), ops).data
        for i, ch in enumerate(active):
            current[ch.chain_id] = nxt[i]
        rows.append({"step": k + 1, "hit1": 100 * float(np.mean(hits)), "n": len(active)})
    return rows


def latent_separation(model, instances: Sequence[EvalInstance]) -> dict[str, SeparationReport]:
    """Mean (anchor-positive minus anchor-negative) cosine, x100, before and after the head."""
    ordered = sorted(instances, key=lambda i: i.instance_id)
    out = {}
    if not ordered:
        return out
    emb = embed_unique(model, (e for inst in ordered for e in (inst.premise,) + inst.candidates))
    e_x = np.stack([emb[inst.premise] for inst in ordered])
    anchors, shifts = _anchor_and_shift(model, e_x, [inst.operation for inst in ordered])
    before: dict[str, list[float]] = {m: [] for m in MODES}
    after: dict[str, list[float]] = {m: [] for m in MODES}
    for i, inst in enumerate(ordered):
        pos = np.stack([emb[c] for c in inst.positives]).astype(np.float64)
        neg = np.stack([emb[c] for c in inst.negatives]).astype(np.float64)
        x = e_x[i].astype(np.float64)
        before[inst.mode].append(cosine_matrix(x, pos).mean() - cosine_matrix(x, neg).mean())
        if shifts is not None:
            pos, neg = pos + shifts[i], neg + shifts[i]
        after[inst.mode].append(cosine_matrix(anchors[i], pos).mean() - cosine_matrix(anchors[i], neg).mean())
    for m in MODES:
        if before[m]:
            out[m] = SeparationReport(m, 100 * float(np.mean(before[m])), 100 * float(np.mean(after[m])), len(before[m]))
    return out


def pca_2d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the top two principal components; returns (coords, component variances)."""
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) < 3:
        raise ValueError("PCA export needs at least 3 embeddings")
    centered = pts - pts.mean(axis=0)
    if not np.any(np.abs(centered) > 1e-12):
        raise DegenerateCovariance("all embeddings coincide")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros_like(comps)])
    coords = centered @ comps.T
    var = (s[:2] ** 2) / max(len(pts) - 1, 1)
    return coords, var


def export_2d(model, instances: Sequence[EvalInstance]) -> list[dict]:
    """2-D PCA coordinates of premise/candidate embeddings before and after the operation head."""
    ordered = sorted(instances, key=lambda i: i.instance_id)
    emb = embed_unique(model, (e for inst in ordered for e in (inst.premise,) + inst.candidates))
    e_x = np.stack([emb[inst.premise] for inst in ordered])
    anchors, shifts = _anchor_and_shift(model, e_x, [inst.operation for inst in ordered])
    rows: list[dict] = []
    for phase in ("before", "after"):
        labels, pts = [], []
        for i, inst in enumerate(ordered):
            shift = shifts[i] if (phase == "after" and shifts is not None) else 0.0
            labels.append((inst.instance_id, "premise" if phase == "before" else "predicted"))
            pts.append(e_x[i] if phase == "before" else anchors[i])
            for kind, group in (("positive", inst.positives), ("negative", inst.negatives)):
                for e in group:
                    labels.append((inst.instance_id, kind))
                    pts.append(emb[e] + shift)
        coords, _ = pca_2d(np.stack(pts))
        for (iid, kind), (cx, cy) in zip(labels, coords):
            rows.append({"id": iid, "phase": phase, "kind": kind, "x": float(cx), "y": float(cy)})
    return rows


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_csv(path: str | os.PathLike, rows: Sequence[dict], config_hash: str | None = None) -> None:
    rows = [dict(r) for r in rows]
    if config_hash is not None:
        for r in rows:
            r["config_hash"] = config_hash
    fields: list[str] = []
    for r in rows:
        fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(v) for k, v in r.items()})


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else v
