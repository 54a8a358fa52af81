"""Differentiable primitives over :class:`Tensor`.

Every function computes its forward value with numpy in the dtype of its
inputs and records a backward closure on the tape. Constant operands (masks,
sparse adjacency matrices, index arrays) never receive gradients.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeMismatch, Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return record(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    return record(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def scale(a: Tensor, s: float) -> Tensor:
    return record(a.data * a.data.dtype.type(s), (a,), lambda g: (g * a.data.dtype.type(s),))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, like=b), b
    return a, b


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return record(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inverse),))


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return record(np.array(out), (a,), bw)


def slice(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:  # noqa: A001
    sl = [np.s_[:]] * a.ndim
    sl[axis] = np.s_[start:stop]
    return index(a, tuple(sl))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeMismatch("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return record(out, tensors, bw)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return record(out, (a, b), bw)


def spmm(adj: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times a dense 2-D tensor."""
    if adj.shape[1] != x.shape[0]:
        raise ShapeMismatch("spmm", adj.shape, x.shape)
    adj = sp.csr_matrix(adj, dtype=x.dtype)
    adj_t = adj.T.tocsr()
    return record(np.asarray(adj @ x.data), (x,), lambda g: (np.asarray(adj_t @ g),))


def embedding_lookup(table: Tensor, indices: np.ndarray, padding_idx: int | None = None) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeMismatch("embedding_lookup", table.shape, (int(indices.max()),))
    out = table.data[indices]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        if padding_idx is not None:
            full[padding_idx] = 0
        return (full,)

    return record(out, (table,), bw)


# ---------------------------------------------------------------------------
# Sequence kernels
# ---------------------------------------------------------------------------


def conv1d(signal: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid 1-D convolution, stride 1.

    signal (B, L, C), kernels (W, C, O), bias (O,) -> (B, L - W + 1, O)
    """
    B, L, C = signal.shape
    W, C2, O = kernels.shape
    if C != C2 or L < W:
        raise ShapeMismatch("conv1d", signal.shape, kernels.shape)
    Lo = L - W + 1
    # (B, Lo, C, W) -> (B, Lo, W, C)
    windows = np.lib.stride_tricks.sliding_window_view(signal.data, W, axis=1)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 2)).reshape(B * Lo, W * C)
    wmat = kernels.data.reshape(W * C, O)
    out = (cols @ wmat).reshape(B, Lo, O)
    if bias is not None:
        out = out + bias.data
    inputs = (signal, kernels) + ((bias,) if bias is not None else ())

    def bw(g):
        g2 = g.reshape(B * Lo, O)
        gk = (cols.T @ g2).reshape(W, C, O)
        gcols = (g2 @ wmat.T).reshape(B, Lo, W, C)
        gs = np.zeros_like(signal.data)
        for k in range(W):
            gs[:, k : k + Lo, :] += gcols[:, :, k, :]
        grads = (gs, gk)
        if bias is not None:
            grads += (g2.sum(axis=0),)
        return grads

    return record(out, inputs, bw)


def max_over_time(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Max over axis 1 of (B, T, C); positions with mask False are ignored."""
    data = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise ValueError("max_over_time: every row needs at least one valid position")
        data = np.where(mask[:, :, None], data, -np.inf)
    arg = data.argmax(axis=1)  # first occurrence wins ties
    out = np.take_along_axis(x.data, arg[:, None, :], axis=1)[:, 0, :]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full,)

    return record(out, (x,), bw)


def mean_over_axis(x: Tensor, axis: int = 1, mask: np.ndarray | None = None) -> Tensor:
    """Mean over ``axis``; with a mask (shape of x up to and including axis) only True entries count."""
    if mask is None:
        return mean(x, axis=axis)
    m = np.asarray(mask, dtype=x.dtype)
    counts = m.sum(axis=axis, keepdims=True)
    if (counts == 0).any():
        raise ValueError("mean_over_axis: empty mask row")
    w = m / counts
    w = w.reshape(w.shape + (1,) * (x.ndim - w.ndim))
    return sum(mul(x, Tensor(w, dtype=x.dtype)), axis=axis)


def lstm_layer(
    x: Tensor,
    lengths: np.ndarray,
    w_ih: Tensor,
    w_hh: Tensor,
    b: Tensor,
) -> Tensor:
    """One LSTM layer over right-padded sequences.

    x (B, L, I), lengths (B,), w_ih (I, 4H), w_hh (H, 4H), b (4H,) -> (B, L, H).
    Gate order i, f, g, o. Positions at or beyond a sequence's length are zero
    and never influence earlier states. Rows are processed longest-first so
    each step only touches active sequences.
    """
    B, L, _ = x.shape
    H = w_hh.shape[0]
    if w_ih.shape[0] != x.shape[2] or w_hh.shape != (H, 4 * H) or w_ih.shape[1] != 4 * H or b.shape != (4 * H,):
        raise ShapeMismatch("lstm_layer", x.shape, w_ih.shape, w_hh.shape, b.shape)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.min() < 1 or lengths.max() > L:
        raise ValueError("lstm_layer: lengths must lie in [1, L]")
    dt = x.dtype
    perm = np.argsort(-lengths, kind="stable")
    inv = np.argsort(perm)
    lens = lengths[perm]
    Lmax = int(lens[0])
    active = [(lens > t).sum() for t in range(Lmax)]
    xs = x.data[perm, :Lmax]
    xw = xs @ w_ih.data + b.data  # (B, Lmax, 4H)
    Whh = w_hh.data
    h = np.zeros((B, H), dt)
    c = np.zeros((B, H), dt)
    hs = np.zeros((B, Lmax, H), dt)
    cache = []
    for t in range(Lmax):
        n = active[t]
        z = xw[:n, t] + h[:n] @ Whh
        s = _sigmoid(z)
        gi, gf, go = s[:, :H], s[:, H : 2 * H], s[:, 3 * H :]
        gg = np.tanh(z[:, 2 * H : 3 * H])
        c_prev = c[:n].copy()
        c_new = gf * c_prev + gi * gg
        tc = np.tanh(c_new)
        h_new = go * tc
        c[:n] = c_new
        h[:n] = h_new
        hs[:n, t] = h_new
        cache.append((gi, gf, gg, go, c_prev, tc))
    out = np.zeros((B, L, H), dt)
    out[:, :Lmax] = hs[inv]

    def bw(g):
        gs = g[perm, :Lmax]
        dh_next = np.zeros((B, H), dt)
        dc_next = np.zeros((B, H), dt)
        gxw = np.zeros_like(xw)
        for t in range(Lmax - 1, -1, -1):
            n = active[t]
            gi, gf, gg, go, c_prev, tc = cache[t]
            dh = gs[:n, t] + dh_next[:n]
            dc = dc_next[:n] + dh * go * (1 - tc * tc)
            dz = gxw[:n, t]
            dz[:, :H] = dc * gg * gi * (1 - gi)
            dz[:, H : 2 * H] = dc * c_prev * gf * (1 - gf)
            dz[:, 2 * H : 3 * H] = dc * gi * (1 - gg * gg)
            dz[:, 3 * H :] = dh * tc * go * (1 - go)
            dh_next[:n] = dz @ Whh.T
            dc_next[:n] = dc * gf
        # rows past their length have zero dz, so one product covers every step
        h_prev = np.zeros_like(hs)
        h_prev[:, 1:] = hs[:, :-1]
        gwhh = h_prev.reshape(-1, H).T @ gxw.reshape(-1, 4 * H)
        gx = np.zeros_like(x.data)
        gx[:, :Lmax] = (gxw @ w_ih.data.T)[inv]
        flat_x = xs.reshape(-1, xs.shape[-1])
        flat_g = gxw.reshape(-1, 4 * H)
        return gx, flat_x.T @ flat_g, gwhh, flat_g.sum(axis=0)

    return record(out, (x, w_ih, w_hh, b), bw)


# ---------------------------------------------------------------------------
# Normalisation and similarity
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), bw)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - m).sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    p = np.exp(x.data - m) / s

    def bw(g):
        return (np.expand_dims(g, axis) * p,)

    return record(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeMismatch("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return record(out, (x, gamma, beta), bw)


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine along the last axis, with numpy broadcasting over the others."""
    _broadcast_shape("cosine_similarity", a, b)
    if a.shape[-1] != b.shape[-1]:
        raise ShapeMismatch("cosine_similarity", a.shape, b.shape)
    na = np.sqrt((a.data * a.data).sum(-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(-1, keepdims=True))
    na = np.maximum(na, eps)
    nb = np.maximum(nb, eps)
    dot = (a.data * b.data).sum(-1, keepdims=True)
    cos = dot / (na * nb)

    def bw(g):
        g = g[..., None]
        ga = g * (b.data / (na * nb) - cos * a.data / (na * na))
        gb = g * (a.data / (na * nb) - cos * b.data / (nb * nb))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(cos[..., 0], (a, b), bw)


def l2_normalize(x: Tensor, eps: float = 1e-8) -> Tensor:
    n = np.maximum(np.sqrt((x.data * x.data).sum(-1, keepdims=True)), eps)
    out = x.data / n

    def bw(g):
        return ((g - out * (g * out).sum(-1, keepdims=True)) / n,)

    return record(out, (x,), bw)
