"""Random expression generators shared by the property tests."""

from __future__ import annotations

import random

from latentmath.expr import (
    FUNCTION_NAMES,
    Expr,
    Function,
    Integer,
    Power,
    Product,
    Sum,
    Symbol,
    simplify,
)

NAMES = ("a", "b", "o", "u", "x", "y", "z")


def random_raw(rng: random.Random, depth: int = 3, names=NAMES, functions=FUNCTION_NAMES) -> Expr:
    """A non-canonical tree built straight from node classes."""
    if depth <= 0 or rng.random() < 0.25:
        if rng.random() < 0.7:
            return Symbol(rng.choice(names))
        return Integer(rng.choice([-3, -2, -1, 1, 2, 3, 5]))
    kind = rng.random()
    if kind < 0.35:
        return Sum([random_raw(rng, depth - 1, names, functions) for _ in range(rng.randint(2, 3))])
    if kind < 0.65:
        return Product([random_raw(rng, depth - 1, names, functions) for _ in range(rng.randint(2, 3))])
    if kind < 0.8:
        return Power(random_raw(rng, depth - 1, names, functions), Integer(rng.choice([-2, -1, 2, 3])))
    return Function(rng.choice(functions), random_raw(rng, depth - 1, names, functions))


def shuffled(rng: random.Random, e: Expr) -> Expr:
    """Same tree with commutative argument lists permuted at every level."""
    if isinstance(e, (Sum, Product)):
        args = [shuffled(rng, a) for a in e.args]
        rng.shuffle(args)
        return type(e)(args)
    if isinstance(e, Power):
        return Power(shuffled(rng, e.base), shuffled(rng, e.exp))
    if isinstance(e, Function):
        return Function(e.name, shuffled(rng, e.arg))
    return e


def random_canonical(rng: random.Random, depth: int = 3, **kw) -> Expr:
    return simplify(random_raw(rng, depth, **kw))
