"""Synthetic derivation corpora.

Premises are synthesised from a symbol vocabulary and randomised (symbol
replacement by scaled/exponentiated copies), then every premise is pushed
through the six operations to produce single-step triples, multi-step chains
and the cross-/intra-operational retrieval sets.

All randomness flows from per-item substreams derived from ``(seed, stream,
index)``, so output is independent of scheduling and worker count.
"""

from __future__ import annotations

import json
import logging
import os
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .expr import (
    Expr,
    Symbol,
    add,
    const,
    count_nodes,
    exp,
    cos,
    free_symbols,
    log,
    mul,
    parse_functional,
    power,
    serialize_functional,
    serialize_latex,
    sin,
    substitute,
)
from .ops import OPERATIONS, NotIntegrable, OperationKind, apply_operation

logger = logging.getLogger(__name__)

DEFAULT_VOCABULARY = ("a", "b", "c", "o", "r", "u", "v", "x", "y", "z")
OPERATOR_POOL = ("Sum", "Product", "Division", "cos", "sin", "log", "exp")
SPLITS = ("train", "dev", "test")
WORKERS_ENV = "LATENTMATH_WORKERS"


class RetryExhausted(RuntimeError):
    pass


class InsufficientPositives(ValueError):
    pass


def substream(seed: int, stream: str, index: int = 0) -> random.Random:
    return random.Random(f"{seed}:{stream}:{index}")


@dataclass(frozen=True)
class Vocabulary:
    names: tuple[str, ...] = DEFAULT_VOCABULARY
    constant_range: tuple[int, int] = (2, 9)

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("vocabulary names must be unique")
        lo, hi = self.constant_range
        if not 2 <= lo <= hi <= 9:
            raise ValueError("constant range must lie within 2..9")


@dataclass(frozen=True)
class RandomisationConfig:
    p_r: float = 0.5
    p_e: float = 0.25
    constant_range: tuple[int, int] = (2, 9)
    seed: int = 0

    def __post_init__(self):
        for name in ("p_r", "p_e"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
            ratio = 1 / value - 1
            if abs(ratio - round(ratio)) > 1e-9:
                raise ValueError(f"1/{name} - 1 must be a non-negative integer, got {ratio}")

    @property
    def p(self) -> int:
        return round(1 / self.p_r - 1)

    @property
    def p_c(self) -> int:
        return round(1 / self.p_e - 1)


@dataclass(frozen=True)
class PremiseSpec:
    num_variables: int
    construction_steps: int = 3
    operator_pool: tuple[str, ...] = OPERATOR_POOL

    def __post_init__(self):
        if not 2 <= self.num_variables <= 5:
            raise ValueError("num_variables must lie in [2, 5]")
        if self.construction_steps < 1:
            raise ValueError("construction_steps must be positive")
        unknown = set(self.operator_pool) - set(OPERATOR_POOL)
        if unknown or not self.operator_pool:
            raise ValueError(f"bad operator pool: {sorted(unknown)}")


@dataclass(frozen=True)
class DerivationTriple:
    premise: Expr
    operation: OperationKind
    operand: str
    conclusion: Expr
    num_premise_vars: int
    split: str = "train"
    flags: tuple[str, ...] = ()

    def to_record(self) -> dict:
        return {
            "premise_latex": serialize_latex(self.premise),
            "premise_fn": serialize_functional(self.premise),
            "operation": self.operation.label,
            "operand": self.operand,
            "conclusion_latex": serialize_latex(self.conclusion),
            "conclusion_fn": serialize_functional(self.conclusion),
            "num_premise_vars": self.num_premise_vars,
            "split": self.split,
            "flags": list(self.flags),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DerivationTriple":
        return cls(
            premise=parse_functional(rec["premise_fn"]),
            operation=OperationKind.parse(rec["operation"]),
            operand=rec["operand"],
            conclusion=parse_functional(rec["conclusion_fn"]),
            num_premise_vars=int(rec["num_premise_vars"]),
            split=rec["split"],
            flags=tuple(rec.get("flags", ())),
        )


@dataclass(frozen=True)
class StepCandidates:
    """Retrieval candidates of one chain step: the true conclusion first."""

    positive: Expr
    cross_negatives: tuple[Expr, ...]
    intra_negatives: tuple[Expr, ...]

    @property
    def negatives(self) -> tuple[Expr, ...]:
        return self.cross_negatives + self.intra_negatives


@dataclass
class MultiStepChain:
    chain_id: int
    steps: list[DerivationTriple]
    candidates: list[StepCandidates] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= len(self.steps) <= 6:
            raise ValueError("chains hold between 1 and 6 steps")
        for prev, nxt in zip(self.steps, self.steps[1:]):
            if prev.conclusion != nxt.premise:
                raise ValueError("chain step premise must equal the previous conclusion")

    @property
    def premise(self) -> Expr:
        return self.steps[0].premise

    @property
    def operations(self) -> list[OperationKind]:
        return [s.operation for s in self.steps]


@dataclass(frozen=True)
class EvalInstance:
    premise: Expr
    operation: OperationKind
    positives: tuple[Expr, ...]
    negatives: tuple[Expr, ...]
    mode: str
    num_premise_vars: int = 0
    instance_id: int = 0

    def __post_init__(self):
        if len(self.positives) != 4 or len(self.negatives) != 20:
            raise ValueError("an eval instance holds 4 positives and 20 negatives")
        if set(self.positives) & set(self.negatives):
            raise ValueError("positives and negatives overlap")
        if self.mode not in ("cross-op", "intra-op"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def candidates(self) -> tuple[Expr, ...]:
        return self.positives + self.negatives

    def to_record(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "premise_fn": serialize_functional(self.premise),
            "operation": self.operation.label,
            "mode": self.mode,
            "num_premise_vars": self.num_premise_vars,
            "positives_fn": [serialize_functional(e) for e in self.positives],
            "negatives_fn": [serialize_functional(e) for e in self.negatives],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EvalInstance":
        return cls(
            premise=parse_functional(rec["premise_fn"]),
            operation=OperationKind.parse(rec["operation"]),
            positives=tuple(parse_functional(t) for t in rec["positives_fn"]),
            negatives=tuple(parse_functional(t) for t in rec["negatives_fn"]),
            mode=rec["mode"],
            num_premise_vars=int(rec.get("num_premise_vars", 0)),
            instance_id=int(rec.get("instance_id", 0)),
        )


# ---------------------------------------------------------------------------
# Premises
# ---------------------------------------------------------------------------


def _combine(op: str, a: Expr, b: Expr) -> Expr:
    if op == "Sum":
        return add(a, b)
    if op == "Product":
        return mul(a, b)
    return mul(a, power(b, const(-1)))


_UNARY = {"cos": cos, "sin": sin, "log": log, "exp": exp}


def build_premise(
    spec: PremiseSpec,
    rng: random.Random,
    vocabulary: Vocabulary = Vocabulary(),
    symbols: Sequence[str] | None = None,
) -> Expr:
    """Combine ``spec.num_variables`` symbols with randomly drawn pool operators.

    Each construction step picks an operator: binary operators merge two of the
    current sub-expressions (or graft a chosen symbol onto the last one), unary
    operators wrap a random sub-expression. Leftover sub-expressions are folded
    with the pool's binary operators. Attempts whose canonical result loses a
    symbol are redrawn.
    """
    if len(vocabulary.names) < spec.num_variables:
        raise ValueError("vocabulary smaller than the requested variable count")
    binary = [op for op in spec.operator_pool if op not in _UNARY] or ["Sum"]
    for _ in range(50):
        names = list(symbols) if symbols is not None else rng.sample(vocabulary.names, spec.num_variables)
        items: list[Expr] = [Symbol(n) for n in names]
        for _ in range(spec.construction_steps):
            op = rng.choice(spec.operator_pool)
            if op in _UNARY:
                i = rng.randrange(len(items))
                items[i] = _UNARY[op](items[i])
            elif len(items) >= 2:
                i, j = rng.sample(range(len(items)), 2)
                merged = _combine(op, items[i], items[j])
                items = [it for k, it in enumerate(items) if k not in (i, j)] + [merged]
            else:
                items[0] = _combine(op, items[0], Symbol(rng.choice(names)))
        while len(items) > 1:
            a, b = items.pop(0), items.pop(0)
            items.append(_combine(rng.choice(binary), a, b))
        result = items[0]
        if len(free_symbols(result)) == spec.num_variables:
            return result
    raise RetryExhausted(f"could not build a premise with {spec.num_variables} free symbols")


def randomise_premise(e: Expr, cfg: RandomisationConfig, rng: random.Random) -> Expr:
    """Replace free symbols by scaled or exponentiated copies (simultaneously)."""
    lo, hi = cfg.constant_range
    constants = list(range(lo, hi + 1))
    mapping: dict[str, Expr] = {}
    for name in sorted(free_symbols(e)):
        s = Symbol(name)
        if rng.choice([0] * cfg.p + [1]) == 0:
            continue
        m = rng.choice([0] * cfg.p_c + [1])
        c = rng.choice(constants)
        if m == 0:
            mapping[name] = mul(s, const(c)) if rng.choice([0, 1]) == 0 else mul(s, const(Fraction(1, c)))
        else:
            c = rng.choice(constants)
            mapping[name] = power(s, const(c))
    return substitute(e, mapping) if mapping else e


@dataclass(frozen=True)
class GenerationConfig:
    seed: int = 0
    num_train: int = 2000
    num_dev: int = 200
    num_test: int = 400
    min_vars: int = 2
    max_vars: int = 5
    construction_steps: int = 3
    operator_pool: tuple[str, ...] = OPERATOR_POOL
    vocabulary: tuple[str, ...] = DEFAULT_VOCABULARY
    p_r: float = 0.5
    p_e: float = 0.25
    v_size: int = 4
    dev_instances: int = 600
    test_instances: int = 1200
    multistep_premises: int = 400
    max_steps: int = 6
    max_nodes: int = 80

    @property
    def randomisation(self) -> RandomisationConfig:
        return RandomisationConfig(p_r=self.p_r, p_e=self.p_e, seed=self.seed)

    @property
    def total_premises(self) -> int:
        return self.num_train + self.num_dev + self.num_test


def _premise_worker(args) -> Expr:
    cfg, index = args
    rng = substream(cfg.seed, "premise", index)
    vocab = Vocabulary(tuple(cfg.vocabulary))
    num_vars = rng.randint(cfg.min_vars, cfg.max_vars)
    spec = PremiseSpec(num_vars, cfg.construction_steps, tuple(cfg.operator_pool))
    for _ in range(50):
        e = randomise_premise(build_premise(spec, rng, vocab), cfg.randomisation, rng)
        if len(free_symbols(e)) == num_vars and count_nodes(e) <= cfg.max_nodes:
            return e
    raise RetryExhausted(f"premise {index}: randomisation kept dropping symbols")


def _map(fn, items: list, workers: int | None = None) -> list:
    workers = workers if workers is not None else int(os.environ.get(WORKERS_ENV, "1"))
    if workers <= 1 or len(items) < 64:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=32))


def generate_premises(cfg: GenerationConfig, workers: int | None = None) -> list[Expr]:
    """Distinct canonical premises, ``cfg.total_premises`` of them, in index order."""
    out: list[Expr] = []
    seen: set[Expr] = set()
    index = 0
    while len(out) < cfg.total_premises:
        need = cfg.total_premises - len(out)
        batch = list(range(index, index + need))
        index += need
        for e in _map(_premise_worker, [(cfg, i) for i in batch], workers):
            if e not in seen:
                seen.add(e)
                out.append(e)
        if index > 20 * cfg.total_premises:
            raise RetryExhausted("too many duplicate premises; enlarge the vocabulary")
    return out


def assign_splits(premises: Sequence[Expr], cfg: GenerationConfig) -> dict[str, list[Expr]]:
    order = list(range(len(premises)))
    substream(cfg.seed, "split").shuffle(order)
    shuffled = [premises[i] for i in order]
    a, b = cfg.num_train, cfg.num_train + cfg.num_dev
    return {"train": shuffled[:a], "dev": shuffled[a:b], "test": shuffled[b : cfg.total_premises]}


# ---------------------------------------------------------------------------
# Single-step corpus
# ---------------------------------------------------------------------------


def _conclusions_for(
    premise: Expr,
    t: OperationKind,
    operands: Sequence[str],
    vocabulary: Sequence[str],
    rng: random.Random,
    max_resamples: int = 10,
) -> tuple[list[tuple[str, Expr]], list[str]]:
    """Apply ``t`` for every operand, redrawing operands that fail.

    An operand fails when integration has no rule, the conclusion equals the
    premise, or it duplicates an earlier conclusion of the same operation.
    """
    out: list[tuple[str, Expr]] = []
    seen: set[Expr] = set()
    tried: set[str] = set()
    flags: list[str] = []
    resamples = 0
    queue = list(operands)
    while queue:
        v = queue.pop(0)
        tried.add(v)
        try:
            y = apply_operation(premise, t, v)
        except NotIntegrable:
            y = None
        if y is not None and y != premise and y not in seen:
            seen.add(y)
            out.append((v, y))
            continue
        untried = [n for n in vocabulary if n not in tried]
        if resamples < max_resamples and untried:
            resamples += 1
            queue.insert(0, rng.choice(untried))
    if resamples:
        flags.append(f"resampled:{t.label}")
    if len(out) < len(operands):
        flags.append(f"short:{t.label}")
    return out, flags


def premise_triples(
    premise: Expr,
    rng: random.Random,
    v_size: int,
    vocabulary: Sequence[str],
    split: str = "train",
    operations: Sequence[OperationKind] = OPERATIONS,
    operands: Sequence[str] | None = None,
) -> list[DerivationTriple]:
    if v_size < 1:
        raise ValueError("v_size must be positive")
    operands = list(operands) if operands is not None else rng.sample(list(vocabulary), v_size)
    nvars = len(free_symbols(premise))
    triples = []
    for t in operations:
        pairs, flags = _conclusions_for(premise, t, operands, vocabulary, rng)
        for v, y in pairs:
            triples.append(DerivationTriple(premise, t, v, y, nvars, split, tuple(flags)))
    return triples


def _corpus_worker(args) -> list[DerivationTriple]:
    premise, split, index, seed, v_size, vocabulary = args
    rng = substream(seed, "operands", index)
    return premise_triples(premise, rng, v_size, vocabulary, split)


def build_single_step_corpus(
    splits: dict[str, list[Expr]],
    v_size: int,
    seed: int,
    vocabulary: Sequence[str] = DEFAULT_VOCABULARY,
    workers: int | None = None,
) -> list[DerivationTriple]:
    if v_size < 4:
        raise ValueError("v_size must be at least 4")
    jobs = []
    index = 0
    for split in SPLITS:
        for premise in splits.get(split, []):
            jobs.append((premise, split, index, seed, v_size, tuple(vocabulary)))
            index += 1
    out: list[DerivationTriple] = []
    for triples in _map(_corpus_worker, jobs, workers):
        out.extend(triples)
    return out


def filter_by_variable_count(corpus: Iterable, k: int) -> list:
    if not 2 <= k <= 5:
        raise ValueError("k must lie in [2, 5]")
    return [item for item in corpus if item.num_premise_vars == k]


def group_by_premise(corpus: Iterable[DerivationTriple]) -> dict[Expr, dict[OperationKind, list[Expr]]]:
    out: dict[Expr, dict[OperationKind, list[Expr]]] = {}
    for tr in corpus:
        out.setdefault(tr.premise, {}).setdefault(tr.operation, []).append(tr.conclusion)
    return out


# ---------------------------------------------------------------------------
# Evaluation sets
# ---------------------------------------------------------------------------


def build_eval_sets(
    corpus: Sequence[DerivationTriple],
    count: int,
    seed: int,
    split: str = "dev",
    stats: dict | None = None,
) -> list[EvalInstance]:
    """Cross-op and intra-op retrieval instances for one split.

    ``count`` is per mode. Cross-op instances are emitted as whole 6-operation
    families of a premise, so the count is rounded down to a multiple of six.
    """
    stats = stats if stats is not None else {}
    rng = substream(seed, f"eval-{split}")
    groups = group_by_premise(tr for tr in corpus if tr.split == split)
    premises = list(groups)
    nvars = {tr.premise: tr.num_premise_vars for tr in corpus if tr.split == split}
    rng.shuffle(premises)

    # a premise-operation pair is usable when it has at least 4 distinct positives
    usable = {p: {t for t, ys in ops.items() if len(ys) >= 4} for p, ops in groups.items()}
    skipped = sum(len(OPERATIONS) - len(u) for u in usable.values())
    stats["insufficient_positives"] = skipped

    instances: list[EvalInstance] = []
    next_id = 0
    cross = 0
    for p in premises:
        if cross + len(OPERATIONS) > count:
            break
        if len(usable[p]) < len(OPERATIONS):
            continue
        chosen = {t: groups[p][t][:4] for t in OPERATIONS}
        family = []
        for t in OPERATIONS:
            negatives = tuple(y for s in OPERATIONS if s != t for y in chosen[s])
            positives = tuple(chosen[t])
            if set(positives) & set(negatives):
                family = None
                break
            family.append(EvalInstance(p, t, positives, negatives, "cross-op", nvars[p]))
        if family is None:
            stats["cross_overlap"] = stats.get("cross_overlap", 0) + 1
            continue
        for inst in family:
            instances.append(_with_id(inst, next_id))
            next_id += 1
        cross += len(OPERATIONS)

    by_op = {t: [p for p in premises if t in usable[p]] for t in OPERATIONS}
    pairs = [(p, t) for p in premises for t in OPERATIONS if t in usable[p]]
    rng.shuffle(pairs)
    intra = 0
    for p, t in pairs:
        if intra >= count:
            break
        positives = tuple(groups[p][t][:4])
        others = [q for q in by_op[t] if q != p]
        rng.shuffle(others)
        negatives: list[Expr] = []
        used = 0
        for q in others:
            cand = groups[q][t][:4]
            if set(cand) & set(positives) or set(cand) & set(negatives):
                continue
            negatives.extend(cand)
            used += 1
            if used == 5:
                break
        if used < 5:
            stats["intra_short"] = stats.get("intra_short", 0) + 1
            continue
        instances.append(EvalInstance(p, t, positives, tuple(negatives), "intra-op", nvars[p], next_id))
        next_id += 1
        intra += 1
    return instances


def _with_id(inst: EvalInstance, i: int) -> EvalInstance:
    return EvalInstance(inst.premise, inst.operation, inst.positives, inst.negatives, inst.mode, inst.num_premise_vars, i)


# ---------------------------------------------------------------------------
# Multi-step chains
# ---------------------------------------------------------------------------


def _step(premise: Expr, rng: random.Random, vocabulary: Sequence[str], max_nodes: int, ops=OPERATIONS):
    for _ in range(11):
        t = rng.choice(ops)
        v = rng.choice(vocabulary)
        try:
            y = apply_operation(premise, t, v)
        except NotIntegrable:
            continue
        if y != premise and count_nodes(y) <= max_nodes:
            return t, v, y
    return None


def build_chain(
    premise: Expr,
    rng: random.Random,
    vocabulary: Sequence[str],
    max_steps: int = 6,
    max_nodes: int = 80,
    chain_id: int = 0,
    forced: Sequence[tuple[OperationKind, str]] | None = None,
) -> MultiStepChain | None:
    nvars = len(free_symbols(premise))
    steps: list[DerivationTriple] = []
    current = premise
    plan = list(forced) if forced is not None else [None] * max_steps
    for item in plan[:max_steps]:
        if item is None:
            drawn = _step(current, rng, vocabulary, max_nodes)
            if drawn is None:
                break
            t, v, y = drawn
        else:
            t, v = item
            y = apply_operation(current, t, v)
        steps.append(DerivationTriple(current, OperationKind(t), v, y, nvars, "test"))
        current = y
    if not steps:
        return None
    return MultiStepChain(chain_id, steps)


def _attach_candidates(chains: list[MultiStepChain], seed: int, vocabulary: Sequence[str], max_nodes: int) -> None:
    by_depth: dict[int, list[Expr]] = {}
    for ch in chains:
        for k, st in enumerate(ch.steps):
            by_depth.setdefault(k, []).append(st.premise)
    for ch in chains:
        rng = substream(seed, "chain-candidates", ch.chain_id)
        ch.candidates = []
        for k, st in enumerate(ch.steps):
            taken = {st.conclusion}
            cross: list[Expr] = []
            other_ops = [t for t in OPERATIONS if t != st.operation]
            for _ in range(40):
                if len(cross) == 2:
                    break
                drawn = _step(st.premise, rng, vocabulary, max_nodes, ops=other_ops)
                if drawn and drawn[2] not in taken:
                    taken.add(drawn[2])
                    cross.append(drawn[2])
            intra: list[Expr] = []
            pool = [q for q in by_depth[k] if q != st.premise]
            for _ in range(40):
                if len(intra) == 2 or not pool:
                    break
                q = rng.choice(pool)
                try:
                    y = apply_operation(q, st.operation, rng.choice(vocabulary))
                except NotIntegrable:
                    continue
                if y not in taken and y != q:
                    taken.add(y)
                    intra.append(y)
            if len(cross) < 2 or len(intra) < 2:
                break
            ch.candidates.append(StepCandidates(st.conclusion, tuple(cross), tuple(intra)))


def build_multistep_corpus(
    premises: Sequence[Expr],
    seed: int,
    vocabulary: Sequence[str] = DEFAULT_VOCABULARY,
    max_steps: int = 6,
    max_nodes: int = 80,
    min_length: int = 2,
) -> list[MultiStepChain]:
    """Chains of up to ``max_steps`` random operations, each with retrieval candidates.

    A chain is truncated where no (operation, operand) draw succeeds within ten
    tries, and where candidates can no longer be drawn; chains shorter than
    ``min_length`` are dropped.
    """
    chains = []
    for i, p in enumerate(premises):
        ch = build_chain(p, substream(seed, "chain", i), vocabulary, max_steps, max_nodes, chain_id=i)
        if ch is not None and len(ch.steps) >= min_length:
            chains.append(ch)
    _attach_candidates(chains, seed, vocabulary, max_nodes)
    out = []
    for ch in chains:
        n = len(ch.candidates)
        if n >= min_length:
            ch.steps = ch.steps[:n]
            out.append(ch)
    return out


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def chain_records(chain: MultiStepChain) -> list[dict]:
    out = []
    for k, (st, cand) in enumerate(zip(chain.steps, chain.candidates)):
        rec = st.to_record()
        rec["chain_id"] = chain.chain_id
        rec["step_index"] = k + 1
        rec["negatives_cross_fn"] = [serialize_functional(e) for e in cand.cross_negatives]
        rec["negatives_intra_fn"] = [serialize_functional(e) for e in cand.intra_negatives]
        out.append(rec)
    return out


def chains_from_records(records: Iterable[dict]) -> list[MultiStepChain]:
    grouped: dict[int, list[dict]] = {}
    for rec in records:
        grouped.setdefault(int(rec["chain_id"]), []).append(rec)
    chains = []
    for cid in sorted(grouped):
        recs = sorted(grouped[cid], key=lambda r: r["step_index"])
        steps = [DerivationTriple.from_record(r) for r in recs]
        cands = [
            StepCandidates(
                s.conclusion,
                tuple(parse_functional(t) for t in r["negatives_cross_fn"]),
                tuple(parse_functional(t) for t in r["negatives_intra_fn"]),
            )
            for s, r in zip(steps, recs)
        ]
        chains.append(MultiStepChain(cid, steps, cands))
    return chains


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


DATASET_FILES = {
    "single": "single_step.jsonl",
    "multi": "multi_step.jsonl",
    "dev": "eval_dev.jsonl",
    "test": "eval_test.jsonl",
    "meta": "metadata.json",
}


def generate_dataset(cfg: GenerationConfig, out_dir: Path, workers: int | None = None) -> dict:
    """Run the full generation pipeline and write every dataset file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    premises = generate_premises(cfg, workers)
    splits = assign_splits(premises, cfg)
    corpus = build_single_step_corpus(splits, cfg.v_size, cfg.seed, cfg.vocabulary, workers)
    stats: dict = {}
    dev = build_eval_sets(corpus, cfg.dev_instances, cfg.seed, "dev", stats.setdefault("dev", {}))
    test = build_eval_sets(corpus, cfg.test_instances, cfg.seed, "test", stats.setdefault("test", {}))
    ms_pool = splits["test"][: cfg.multistep_premises]
    chains = build_multistep_corpus(ms_pool, cfg.seed, cfg.vocabulary, cfg.max_steps, cfg.max_nodes)

    write_jsonl(out_dir / DATASET_FILES["single"], (tr.to_record() for tr in corpus))
    write_jsonl(out_dir / DATASET_FILES["multi"], (r for ch in chains for r in chain_records(ch)))
    write_jsonl(out_dir / DATASET_FILES["dev"], (i.to_record() for i in dev))
    write_jsonl(out_dir / DATASET_FILES["test"], (i.to_record() for i in test))

    counts = {
        "premises": {s: len(splits[s]) for s in SPLITS},
        "triples": {s: sum(1 for tr in corpus if tr.split == s) for s in SPLITS},
        "flagged_triples": sum(1 for tr in corpus if tr.flags),
        "eval_dev": {m: sum(1 for i in dev if i.mode == m) for m in ("cross-op", "intra-op")},
        "eval_test": {m: sum(1 for i in test if i.mode == m) for m in ("cross-op", "intra-op")},
        "chains": len(chains),
        "chain_steps": sum(len(ch.steps) for ch in chains),
        "eval_skips": stats,
    }
    meta = {
        "seed": cfg.seed,
        "p_r": cfg.p_r,
        "p_e": cfg.p_e,
        "vocabulary": list(cfg.vocabulary),
        "counts": counts,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()},
    }
    with open(out_dir / DATASET_FILES["meta"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    logger.info("generated %s", counts)
    return meta


@dataclass
class Dataset:
    corpus: list[DerivationTriple]
    dev: list[EvalInstance]
    test: list[EvalInstance]
    chains: list[MultiStepChain]
    meta: dict

    def split(self, name: str) -> list[DerivationTriple]:
        return [tr for tr in self.corpus if tr.split == name]


def load_dataset(data_dir: Path) -> Dataset:
    data_dir = Path(data_dir)
    missing = [n for n in DATASET_FILES.values() if not (data_dir / n).exists()]
    if missing:
        raise FileNotFoundError(f"dataset files missing in {data_dir}: {missing}")
    corpus = [DerivationTriple.from_record(r) for r in read_jsonl(data_dir / DATASET_FILES["single"])]
    dev = [EvalInstance.from_record(r) for r in read_jsonl(data_dir / DATASET_FILES["dev"])]
    test = [EvalInstance.from_record(r) for r in read_jsonl(data_dir / DATASET_FILES["test"])]
    chains = chains_from_records(read_jsonl(data_dir / DATASET_FILES["multi"]))
    with open(data_dir / DATASET_FILES["meta"], encoding="utf-8") as fh:
        meta = json.load(fh)
    return Dataset(corpus, dev, test, chains, meta)
