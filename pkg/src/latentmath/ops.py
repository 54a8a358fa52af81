"""The six atomic operations and the derivation function f(x, t; V)."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .expr import (
    MINUS_ONE,
    ONE,
    ZERO,
    Const,
    Expr,
    Function,
    Power,
    Product,
    Sum,
    Symbol,
    add,
    const,
    cos,
    free_symbols,
    func,
    log,
    mul,
    power,
    sin,
)


class NotIntegrable(ValueError):
    pass


class EmptyConclusionSet(ValueError):
    pass


class OperationKind(enum.IntEnum):
    ADDITION = 0
    SUBTRACTION = 1
    MULTIPLICATION = 2
    DIVISION = 3
    DIFFERENTIATION = 4
    INTEGRATION = 5

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "OperationKind":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown operation {text!r}") from None


OPERATIONS = tuple(OperationKind)


def differentiate(e: Expr, v: str) -> Expr:
    if v not in free_symbols(e):
        return ZERO
    if isinstance(e, Symbol):
        return ONE
    if isinstance(e, Sum):
        return add(*(differentiate(a, v) for a in e.args))
    if isinstance(e, Product):
        terms = []
        for i, a in enumerate(e.args):
            da = differentiate(a, v)
            if da != ZERO:
                terms.append(mul(*e.args[:i], da, *e.args[i + 1 :]))
        return add(*terms)
    if isinstance(e, Power):
        base, ex = e.base, e.exp
        if v not in free_symbols(ex):
            return mul(ex, power(base, add(ex, MINUS_ONE)), differentiate(base, v))
        # general case b^g: b^g * (g' log b + g b'/b)
        return mul(
            e,
            add(
                mul(differentiate(ex, v), log(base)),
                mul(ex, differentiate(base, v), power(base, MINUS_ONE)),
            ),
        )
    if isinstance(e, Function):
        inner = differentiate(e.arg, v)
        if e.name == "cos":
            outer = mul(MINUS_ONE, sin(e.arg))
        elif e.name == "sin":
            outer = cos(e.arg)
        elif e.name == "log":
            outer = power(e.arg, MINUS_ONE)
        else:
            outer = e
        return mul(outer, inner)
    raise TypeError(f"cannot differentiate {e!r}")


def integrate(e: Expr, v: str) -> Expr:
    """Antiderivative of ``e`` with respect to ``v`` by a fixed rule set.

    Linearity over sums is tried first, then v-free expressions become ``e*v``;
    v-free factors of a product are pulled out; what remains must be a power
    of ``v`` or one of cos/sin/exp applied directly to ``v``.

    Raises:
        NotIntegrable: no rule matches.
    """
    var = Symbol(v)
    if isinstance(e, Sum):
        return add(*(integrate(a, v) for a in e.args))
    if v not in free_symbols(e):
        return mul(e, var)
    if isinstance(e, Product):
        free = [a for a in e.args if v not in free_symbols(a)]
        bound = [a for a in e.args if v in free_symbols(a)]
        if len(bound) != 1:
            raise NotIntegrable(f"product with {len(bound)} factors in {v}")
        return mul(*free, integrate(bound[0], v))
    if e == var:
        return mul(const(Fraction(1, 2)), power(var, const(2)))
    if isinstance(e, Power) and e.base == var and isinstance(e.exp, Const):
        n = e.exp.value
        if n == -1:
            return log(var)
        return mul(const(1 / (n + 1)), power(var, const(n + 1)))
    if isinstance(e, Function) and e.arg == var:
        if e.name == "cos":
            return sin(var)
        if e.name == "sin":
            return mul(MINUS_ONE, cos(var))
        if e.name == "exp":
            return e
    raise NotIntegrable(f"no rule for {e!r} in {v}")


def apply_operation(e: Expr, t: OperationKind, v: str) -> Expr:
    var = Symbol(v)
    t = OperationKind(t)
    if t is OperationKind.ADDITION:
        return add(e, var)
    if t is OperationKind.SUBTRACTION:
        return add(e, mul(MINUS_ONE, var))
    if t is OperationKind.MULTIPLICATION:
        return mul(e, var)
    if t is OperationKind.DIVISION:
        return mul(e, power(var, MINUS_ONE))
    if t is OperationKind.DIFFERENTIATION:
        return differentiate(e, v)
    return integrate(e, v)


@dataclass(frozen=True)
class ConclusionSet:
    operation: OperationKind
    conclusions: tuple[tuple[str, Expr], ...]

    @property
    def results(self) -> list[Expr]:
        return [r for _, r in self.conclusions]

    @property
    def operands(self) -> list[str]:
        return [v for v, _ in self.conclusions]

    def __len__(self) -> int:
        return len(self.conclusions)


def enumerate_conclusions(e: Expr, t: OperationKind, operands: Sequence[str]) -> ConclusionSet:
    if not operands:
        raise ValueError("operand set must be non-empty")
    seen: set[Expr] = set()
    out: list[tuple[str, Expr]] = []
    for v in operands:
        try:
            y = apply_operation(e, t, v)
        except NotIntegrable:
            continue
        if y in seen:
            continue
        seen.add(y)
        out.append((v, y))
    if not out:
        raise EmptyConclusionSet(f"no operand in {list(operands)} yields a conclusion for {OperationKind(t).label}")
    return ConclusionSet(OperationKind(t), tuple(out))
