"""Canonical expression trees.

Every constructor in this module returns canonical form: sums and products are
flattened, constant-folded and sorted, like terms are collected and equal bases
are merged into powers. Two expressions that are equal under these rewrites are
structurally equal (and therefore serialize identically).
"""

from __future__ import annotations

import math
from fractions import Fraction
from typing import Iterable, Mapping

FUNCTION_NAMES = ("cos", "sin", "log", "exp")


class ParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class DomainError(ArithmeticError):
    pass


class MissingSymbol(KeyError):
    pass


class Expr:
    """Base class of all expression nodes. Nodes are immutable."""

    __slots__ = ("_hash", "_key")

    def __init__(self) -> None:
        self._hash: int | None = None
        self._key: tuple | None = None

    def children(self) -> tuple["Expr", ...]:
        return ()

    @property
    def key(self) -> tuple:
        if self._key is None:
            self._key = self._make_key()
        return self._key

    def _make_key(self) -> tuple:
        raise NotImplementedError

    def _ident(self) -> tuple:
        raise NotImplementedError

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(self._ident())
        return self._hash

    def __eq__(self, other: object) -> bool:
        if self is other:
            return True
        if type(self) is not type(other):
            return False
        if hash(self) != hash(other):
            return False
        return self._ident() == other._ident()

    def __lt__(self, other: "Expr") -> bool:
        return self.key < other.key

    def __repr__(self) -> str:
        return serialize_functional(self)

    # Arithmetic sugar; every result is canonical.
    def __add__(self, other):
        return add(self, as_expr(other))

    def __radd__(self, other):
        return add(as_expr(other), self)

    def __sub__(self, other):
        return add(self, mul(MINUS_ONE, as_expr(other)))

    def __rsub__(self, other):
        return add(as_expr(other), mul(MINUS_ONE, self))

    def __mul__(self, other):
        return mul(self, as_expr(other))

    def __rmul__(self, other):
        return mul(as_expr(other), self)

    def __truediv__(self, other):
        return mul(self, power(as_expr(other), MINUS_ONE))

    def __rtruediv__(self, other):
        return mul(as_expr(other), power(self, MINUS_ONE))

    def __pow__(self, other):
        return power(self, as_expr(other))

    def __neg__(self):
        return mul(MINUS_ONE, self)


class Const(Expr):
    __slots__ = ()

    @property
    def value(self) -> Fraction:
        raise NotImplementedError

    def _make_key(self) -> tuple:
        return (0, self.value)


class Integer(Const):
    __slots__ = ("n",)

    def __init__(self, n: int) -> None:
        super().__init__()
        self.n = int(n)

    @property
    def value(self) -> Fraction:
        return Fraction(self.n)

    def _ident(self) -> tuple:
        return ("I", self.n)


class Rational(Const):
    __slots__ = ("p", "q")

    def __init__(self, p: int, q: int) -> None:
        super().__init__()
        frac = Fraction(p, q)
        if frac.denominator == 1:
            raise ValueError("Rational with unit denominator must be an Integer")
        self.p = frac.numerator
        self.q = frac.denominator

    @property
    def value(self) -> Fraction:
        return Fraction(self.p, self.q)

    def _ident(self) -> tuple:
        return ("Q", self.p, self.q)


class Symbol(Expr):
    __slots__ = ("name",)

    def __init__(self, name: str) -> None:
        super().__init__()
        if not name or not name.isidentifier():
            raise ValueError(f"invalid symbol name {name!r}")
        self.name = name

    def _make_key(self) -> tuple:
        return (1, self.name)

    def _ident(self) -> tuple:
        return ("S", self.name)


class Function(Expr):
    __slots__ = ("name", "arg")

    def __init__(self, name: str, arg: Expr) -> None:
        super().__init__()
        if name not in FUNCTION_NAMES:
            raise ValueError(f"unknown function {name!r}")
        self.name = name
        self.arg = arg

    def children(self):
        return (self.arg,)

    def _make_key(self) -> tuple:
        return (2, self.name, self.arg.key)

    def _ident(self) -> tuple:
        return ("F", self.name, self.arg)


class Power(Expr):
    __slots__ = ("base", "exp")

    def __init__(self, base: Expr, exp: Expr) -> None:
        super().__init__()
        self.base = base
        self.exp = exp

    def children(self):
        return (self.base, self.exp)

    def _make_key(self) -> tuple:
        return (3, self.base.key, self.exp.key)

    def _ident(self) -> tuple:
        return ("P", self.base, self.exp)


class _Assoc(Expr):
    __slots__ = ("args",)
    RANK = -1

    def __init__(self, args: Iterable[Expr]) -> None:
        super().__init__()
        self.args = tuple(args)
        if len(self.args) < 2:
            raise ValueError(f"{type(self).__name__} needs at least two arguments")

    def children(self):
        return self.args

    def _make_key(self) -> tuple:
        return (self.RANK, tuple(a.key for a in self.args))

    def _ident(self) -> tuple:
        return (type(self).__name__, self.args)


class Product(_Assoc):
    __slots__ = ()
    RANK = 4


class Sum(_Assoc):
    __slots__ = ()
    RANK = 5


ZERO = Integer(0)
ONE = Integer(1)
MINUS_ONE = Integer(-1)


def const(value: Fraction | int) -> Const:
    value = Fraction(value)
    if value.denominator == 1:
        return Integer(value.numerator)
    return Rational(value.numerator, value.denominator)


def as_expr(value) -> Expr:
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, Fraction)):
        return const(value)
    if isinstance(value, str):
        return Symbol(value)
    raise TypeError(f"cannot convert {type(value).__name__} to an expression")


def sort_key(e: Expr) -> tuple:
    return e.key


# ---------------------------------------------------------------------------
# Canonical constructors
# ---------------------------------------------------------------------------


def split_coefficient(term: Expr) -> tuple[Fraction, Expr]:
    """Split a non-constant canonical term into (numeric coefficient, rest)."""
    if isinstance(term, Product) and isinstance(term.args[0], Const):
        rest = term.args[1:]
        return term.args[0].value, rest[0] if len(rest) == 1 else Product(rest)
    return Fraction(1), term


def _scale(coeff: Fraction, rest: Expr) -> Expr:
    if coeff == 1:
        return rest
    if isinstance(rest, Product):
        return Product((const(coeff),) + rest.args)
    return Product((const(coeff), rest))


def add(*terms: Expr) -> Expr:
    flat: list[Expr] = []
    for t in terms:
        if isinstance(t, Sum):
            flat.extend(t.args)
        else:
            flat.append(t)
    constant = Fraction(0)
    collected: dict[Expr, Fraction] = {}
    for t in flat:
        if isinstance(t, Const):
            constant += t.value
            continue
        coeff, rest = split_coefficient(t)
        collected[rest] = collected.get(rest, Fraction(0)) + coeff
    out = [_scale(c, rest) for rest, c in collected.items() if c != 0]
    if constant != 0:
        out.append(const(constant))
    if not out:
        return ZERO
    if len(out) == 1:
        return out[0]
    out.sort(key=sort_key)
    return Sum(out)


def mul(*factors: Expr) -> Expr:
    flat: list[Expr] = []
    for f in factors:
        if isinstance(f, Product):
            flat.extend(f.args)
        else:
            flat.append(f)
    coeff = Fraction(1)
    exponents: dict[Expr, list[Expr]] = {}
    for f in flat:
        if isinstance(f, Const):
            coeff *= f.value
            continue
        if isinstance(f, Power):
            exponents.setdefault(f.base, []).append(f.exp)
        else:
            exponents.setdefault(f, []).append(ONE)
    if coeff == 0:
        return ZERO
    out: list[Expr] = []
    renormalize = False
    for base, exps in exponents.items():
        p = power(base, exps[0] if len(exps) == 1 else add(*exps))
        if isinstance(p, Const):
            coeff *= p.value
            if coeff == 0:
                return ZERO
        else:
            if isinstance(p, Product) or (isinstance(p, Power) and p.base != base):
                renormalize = True
            out.append(p)
    if renormalize:
        # merging exposed a new product or a base shared with another factor
        return mul(const(coeff), *out)
    if not out:
        return const(coeff)
    out.sort(key=sort_key)
    if coeff != 1:
        out.insert(0, const(coeff))
    if len(out) == 1:
        return out[0]
    return Product(out)


def power(base: Expr, exp: Expr) -> Expr:
    if isinstance(exp, Const):
        if exp.value == 0:
            if isinstance(base, Const) and base.value == 0:
                return Power(base, exp)
            return ONE
        if exp.value == 1:
            return base
    if isinstance(base, Const):
        if base.value == 1:
            return ONE
        if isinstance(exp, Integer):
            if base.value == 0:
                return Power(base, exp) if exp.n < 0 else ZERO
            return const(base.value ** exp.n)
        return Power(base, exp)
    if isinstance(exp, Integer):
        if isinstance(base, Power):
            return power(base.base, mul(base.exp, exp))
        if isinstance(base, Product):
            return mul(*(power(f, exp) for f in base.args))
    return Power(base, exp)


def func(name: str, arg: Expr) -> Expr:
    if isinstance(arg, Const):
        v = arg.value
        if name == "log" and v == 1:
            return ZERO
        if name in ("exp", "cos") and v == 0:
            return ONE
        if name == "sin" and v == 0:
            return ZERO
    return Function(name, arg)


def cos(arg: Expr) -> Expr:
    return func("cos", arg)


def sin(arg: Expr) -> Expr:
    return func("sin", arg)


def log(arg: Expr) -> Expr:
    return func("log", arg)


def exp(arg: Expr) -> Expr:
    return func("exp", arg)


def simplify(e: Expr) -> Expr:
    """Rebuild ``e`` bottom-up through the canonical constructors."""
    if isinstance(e, Integer):
        return e
    if isinstance(e, Rational):
        return const(e.value)
    if isinstance(e, Symbol):
        return e
    if isinstance(e, Function):
        return func(e.name, simplify(e.arg))
    if isinstance(e, Power):
        return power(simplify(e.base), simplify(e.exp))
    if isinstance(e, Product):
        return mul(*(simplify(a) for a in e.args))
    if isinstance(e, Sum):
        return add(*(simplify(a) for a in e.args))
    raise TypeError(f"not an expression: {e!r}")


def free_symbols(e: Expr) -> set[str]:
    out: set[str] = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Symbol):
            out.add(node.name)
        else:
            stack.extend(node.children())
    return out


def count_nodes(e: Expr) -> int:
    return 1 + sum(count_nodes(c) for c in e.children())


def substitute(e: Expr, mapping: Mapping[str, Expr]) -> Expr:
    """Simultaneous substitution of symbols, followed by canonicalization."""
    if isinstance(e, Symbol):
        return mapping.get(e.name, e)
    if isinstance(e, Const):
        return e
    if isinstance(e, Function):
        return func(e.name, substitute(e.arg, mapping))
    if isinstance(e, Power):
        return power(substitute(e.base, mapping), substitute(e.exp, mapping))
    if isinstance(e, Product):
        return mul(*(substitute(a, mapping) for a in e.args))
    return add(*(substitute(a, mapping) for a in e.args))


# ---------------------------------------------------------------------------
# Numeric evaluation
# ---------------------------------------------------------------------------


def evaluate_numeric(e: Expr, assignment: Mapping[str, float]) -> float:
    if isinstance(e, Const):
        return float(e.value)
    if isinstance(e, Symbol):
        try:
            return float(assignment[e.name])
        except KeyError:
            raise MissingSymbol(e.name) from None
    if isinstance(e, Sum):
        return math.fsum(evaluate_numeric(a, assignment) for a in e.args)
    if isinstance(e, Product):
        out = 1.0
        for a in e.args:
            out *= evaluate_numeric(a, assignment)
        return out
    if isinstance(e, Power):
        b = evaluate_numeric(e.base, assignment)
        x = evaluate_numeric(e.exp, assignment)
        if b == 0 and x < 0:
            raise DomainError("division by zero")
        if b < 0 and not float(x).is_integer():
            raise DomainError("fractional power of a negative number")
        try:
            return b**x
        except OverflowError:
            raise DomainError("overflow") from None
    if isinstance(e, Function):
        x = evaluate_numeric(e.arg, assignment)
        if e.name == "log":
            if x <= 0:
                raise DomainError("log of a non-positive number")
            return math.log(x)
        if e.name == "exp":
            try:
                return math.exp(x)
            except OverflowError:
                raise DomainError("overflow") from None
        return math.cos(x) if e.name == "cos" else math.sin(x)
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# Functional form
# ---------------------------------------------------------------------------


def serialize_functional(e: Expr) -> str:
    if isinstance(e, Integer):
        return f"Integer({e.n})"
    if isinstance(e, Rational):
        return f"Rational({e.p}, {e.q})"
    if isinstance(e, Symbol):
        return f"Symbol('{e.name}')"
    if isinstance(e, Function):
        return f"{e.name}({serialize_functional(e.arg)})"
    if isinstance(e, Power):
        return f"Pow({serialize_functional(e.base)}, {serialize_functional(e.exp)})"
    head = "Add" if isinstance(e, Sum) else "Mul"
    return f"{head}({', '.join(serialize_functional(a) for a in e.args)})"


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0

    def fail(self, message: str):
        offset = len(self.text[: self.pos].encode("utf-8"))
        raise ParseError(message, offset)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def expect(self, literal: str) -> None:
        self.skip_ws()
        if not self.text.startswith(literal, self.pos):
            self.fail(f"expected {literal!r}")
        self.pos += len(literal)

    def ident(self) -> str:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isascii() and (
            self.text[self.pos].isalnum() or self.text[self.pos] == "_"
        ):
            self.pos += 1
        if start == self.pos:
            self.fail("expected a name")
        return self.text[start : self.pos]

    def integer(self) -> int:
        self.skip_ws()
        start = self.pos
        if self.pos < len(self.text) and self.text[self.pos] in "+-":
            self.pos += 1
        digits = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        if digits == self.pos:
            self.fail("expected an integer")
        return int(self.text[start : self.pos])

    def args(self) -> list[Expr]:
        items = [self.expr()]
        self.skip_ws()
        while self.pos < len(self.text) and self.text[self.pos] == ",":
            self.pos += 1
            items.append(self.expr())
            self.skip_ws()
        return items

    def expr(self) -> Expr:
        start = self.pos
        head = self.ident()
        self.expect("(")
        if head in ("Add", "Mul"):
            items = self.args()
            if len(items) < 2:
                self.pos = start
                self.fail(f"{head} needs at least two arguments")
            node = add(*items) if head == "Add" else mul(*items)
        elif head == "Pow":
            base = self.expr()
            self.expect(",")
            node = power(base, self.expr())
        elif head in FUNCTION_NAMES:
            node = func(head, self.expr())
        elif head == "Symbol":
            self.expect("'")
            name = self.ident()
            self.expect("'")
            node = Symbol(name)
        elif head == "Integer":
            node = Integer(self.integer())
        elif head == "Rational":
            p = self.integer()
            self.expect(",")
            q = self.integer()
            if q == 0:
                self.fail("zero denominator")
            node = const(Fraction(p, q))
        else:
            self.pos = start
            self.fail(f"unknown head {head!r}")
        self.expect(")")
        return node


def parse_functional(text: str) -> Expr:
    parser = _Parser(text)
    node = parser.expr()
    parser.skip_ws()
    if parser.pos != len(text):
        parser.fail("trailing input")
    return node


# ---------------------------------------------------------------------------
# LaTeX form (output only)
# ---------------------------------------------------------------------------


def _name_key(name: str) -> tuple:
    # Descending lexicographic order on names.
    return tuple(-ord(ch) for ch in name) + (1,)


def _has_function(e: Expr) -> bool:
    if isinstance(e, Function):
        return True
    return any(_has_function(c) for c in e.children())


def _degree(e: Expr) -> int:
    if isinstance(e, Symbol):
        return 1
    if isinstance(e, Power) and isinstance(e.exp, Integer):
        return e.exp.n * _degree(e.base)
    if isinstance(e, Product):
        return sum(_degree(a) for a in e.args)
    return 0


def _latex_term_key(term: Expr) -> tuple:
    if isinstance(term, Const):
        return (2,)
    _, rest = split_coefficient(term)
    names = sorted(free_symbols(rest), reverse=True)
    return (1 if _has_function(rest) else 0, tuple(_name_key(n) for n in names), -_degree(rest), rest.key)


def _latex_factor_key(f: Expr) -> tuple:
    base = f.base if isinstance(f, Power) else f
    if isinstance(base, Symbol):
        return (0, _name_key(base.name), f.key)
    return (1, f.key)


def _latex_const(v: Fraction) -> str:
    if v.denominator == 1:
        return str(v.numerator)
    return f"\\frac{{{v.numerator}}}{{{v.denominator}}}"


def _wrap(e: Expr) -> str:
    return f"({serialize_latex(e)})"


def _latex_factor(f: Expr) -> str:
    if isinstance(f, Sum):
        return _wrap(f)
    if isinstance(f, Power):
        return _latex_power(f)
    return serialize_latex(f)


def _latex_power(p: Power) -> str:
    base = p.base
    if isinstance(base, Symbol) or (isinstance(base, Integer) and base.n >= 0):
        b = serialize_latex(base)
    else:
        b = _wrap(base)
    return f"{b}^{{{serialize_latex(p.exp)}}}"


def _is_negative_power(f: Expr) -> bool:
    return isinstance(f, Power) and isinstance(f.exp, Const) and f.exp.value < 0


def _latex_product(coeff: Fraction, factors: list[Expr]) -> str:
    """Render coeff * prod(factors); the sign is emitted by the caller."""
    num = [f for f in factors if not _is_negative_power(f)]
    den = [power(f.base, const(-f.exp.value)) for f in factors if _is_negative_power(f)]
    num.sort(key=_latex_factor_key)
    den.sort(key=_latex_factor_key)
    coeff = abs(coeff)
    if coeff.denominator != 1 or den:
        top = [str(coeff.numerator)] if coeff.numerator != 1 or not num else []
        top += [_latex_factor(f) for f in num]
        bottom = [str(coeff.denominator)] if coeff.denominator != 1 else []
        bottom += [_latex_factor(f) if len(den) > 1 or coeff.denominator != 1 or isinstance(f, Power) else serialize_latex(f) for f in den]
        return f"\\frac{{{' '.join(top) or '1'}}}{{{' '.join(bottom)}}}"
    parts = [str(coeff.numerator)] if coeff != 1 else []
    parts += [_latex_factor(f) for f in num]
    return " ".join(parts)


def _latex_signed(term: Expr) -> tuple[bool, str]:
    if isinstance(term, Const):
        return term.value < 0, _latex_const(abs(term.value))
    if isinstance(term, Product):
        coeff, _ = split_coefficient(term)
        factors = list(term.args[1:] if coeff != 1 else term.args)
        return coeff < 0, _latex_product(coeff, factors)
    if _is_negative_power(term):
        return False, _latex_product(Fraction(1), [term])
    if isinstance(term, Power):
        return False, _latex_power(term)
    return False, serialize_latex(term)


def serialize_latex(e: Expr) -> str:
    if isinstance(e, Const):
        v = e.value
        return ("- " if v < 0 else "") + _latex_const(abs(v))
    if isinstance(e, Symbol):
        return e.name
    if isinstance(e, Function):
        return f"\\{e.name}{{({serialize_latex(e.arg)})}}"
    if isinstance(e, Sum):
        parts: list[str] = []
        for i, term in enumerate(sorted(e.args, key=_latex_term_key)):
            neg, body = _latex_signed(term)
            if i == 0:
                parts.append(f"- {body}" if neg else body)
            else:
                parts.append(f"{'-' if neg else '+'} {body}")
        return " ".join(parts)
    neg, body = _latex_signed(e)
    return f"- {body}" if neg else body
