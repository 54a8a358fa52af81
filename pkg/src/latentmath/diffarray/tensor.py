"""Tensor type and the reverse-mode tape."""

from __future__ import annotations

import contextlib
import threading
import weakref
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    def __init__(self, op: str, *shapes):
        shown = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.shapes = shapes


class NotScalar(ValueError):
    pass


class NoTape(RuntimeError):
    pass


class _Node:
    __slots__ = ("inputs", "backward", "out")

    def __init__(self, inputs, backward, out):
        self.inputs = inputs
        self.backward = backward
        self.out = weakref.ref(out)


class _TapeState(threading.local):
    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True


_state = _TapeState()


def tape_nodes() -> list[_Node]:
    return _state.nodes


def clear_tape() -> None:
    _state.nodes = []


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return _state.enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # operator sugar, implemented in functional
    def __add__(self, other):
        from . import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F

        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F

        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import functional as F

        return F.div(self, other)

    def __neg__(self):
        from . import functional as F

        return F.neg(self)

    def __matmul__(self, other):
        from . import functional as F

        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F

        return F.index(self, index)

    def __pow__(self, p: float):
        from . import functional as F

        return F.power(self, p)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def record(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap a forward value; append a tape node when any input needs a gradient."""
    needs = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        node = _Node(tuple(inputs), backward_fn, out)
        out._node = node
        _state.nodes.append(node)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; the tape is consumed.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        raise NoTape("loss was not produced under an active tape")
    nodes = _state.nodes
    try:
        start = next(i for i in range(len(nodes) - 1, -1, -1) if nodes[i] is loss._node)
    except StopIteration:
        raise NoTape("loss node is not on the current tape (already consumed?)") from None
    loss.grad = np.ones_like(loss.data)
    for i in range(start, -1, -1):
        node = nodes[i]
        out = node.out()
        if out is None or out.grad is None:
            continue
        grads = node.backward(out.grad)
        if out._node is not None:
            out.grad = None if out is not loss else out.grad
        for t, g in zip(node.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise ShapeMismatch("backward", g.shape, t.shape)
            if t.grad is None:
                t.grad = np.array(g, dtype=t.dtype, copy=True)
            else:
                t.grad += g
    clear_tape()
    for node in nodes:
        node.inputs = ()
