"""Operation trees: the expression AST as a labelled graph."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from ..expr import Const, Expr, Function, Power, Product, Sum, Symbol
from .tokenizer import TokenVocabulary


@dataclass(frozen=True)
class OperationTree:
    labels: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    root: int = 0

    def __len__(self) -> int:
        return len(self.labels)


def node_label(e: Expr) -> str:
    if isinstance(e, Sum):
        return "Sum"
    if isinstance(e, Product):
        return "Product"
    if isinstance(e, Power):
        return "Power"
    if isinstance(e, Function):
        return e.name
    if isinstance(e, Symbol):
        return e.name
    if isinstance(e, Const):
        v = e.value
        if v.denominator != 1:
            return "<frac>" if v > 0 else "<-frac>"
        if -9 <= v <= 9:
            return str(v.numerator)
        return "<big>" if v > 0 else "<-big>"
    raise TypeError(type(e).__name__)


def build_operation_tree(e: Expr) -> OperationTree:
    labels: list[str] = []
    edges: list[tuple[int, int]] = []
    stack: list[tuple[Expr, int]] = [(e, -1)]
    while stack:
        node, parent = stack.pop()
        idx = len(labels)
        labels.append(node_label(node))
        if parent >= 0:
            edges.append((parent, idx))
        for child in reversed(node.children()):
            stack.append((child, idx))
    return OperationTree(tuple(labels), tuple(edges))


def build_label_vocabulary(trees: Iterable[OperationTree]) -> TokenVocabulary:
    """Node labels share the token-vocabulary format (PAD and UNK reserved)."""
    seen: set[str] = set()
    for tree in trees:
        seen.update(tree.labels)
    return TokenVocabulary(sorted(seen))
