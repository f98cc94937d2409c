"""Differentiable primitives.

Every function takes :class:`Tensor` (or array-like constants) and returns a
Tensor whose node holds the backward rule.  Broadcasting follows numpy;
gradients are summed back to the input shape.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def fn(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), fn, "div")


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------
def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    if isinstance(p, Tensor):
        raise TypeError("power: exponent must be a Python scalar")
    xd = x.data
    if p == 2:
        return make_result(xd * xd, (x,), lambda g: (2.0 * g * xd,), "power")
    return make_result(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),), "power")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(x) -> Tensor:
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_SQRT_2_OVER_PI * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def fn(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return make_result(out, (x,), fn, "gelu")


# ---------------------------------------------------------------------------
# contractions
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch shape mismatch {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), fn, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T (+ bias)`` with weight stored as (out, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: shape mismatch {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias shape {bias.shape} vs weight {weight.shape}")
        out += bias.data
        parents = (x, weight, bias)
    out = out.reshape(lead + (wd.shape[0],))

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(out, parents, fn, "linear")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.asarray(out, x.data.dtype), (x,), fn, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return make_result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,),
                       lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def index(x, idx) -> Tensor:
    """Basic or advanced indexing (slice, masked-select style gather)."""
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    out = x.data[idx]
    shape = x.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, idx, g)
        return (full,)

    return make_result(np.array(out, copy=True), (x,), fn, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
                i != ax and p != q for i, (p, q) in enumerate(zip(ref, t.shape))):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return make_result(np.concatenate([t.data for t in ts], axis=ax), ts,
                       lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {table.shape}")
    shape = table.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return make_result(table.data[ids], (table,), fn, "embedding")


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).data)


# ---------------------------------------------------------------------------
# normalisation and softmax family
# ---------------------------------------------------------------------------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), fn, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), fn, "log_softmax")


def attention(q, k, v, n_heads: int, bias=None) -> Tensor:
    """Multi-head scaled dot-product attention on (B, S, D) inputs.

    ``bias`` is an additive score bias broadcastable to (B, H, Sq, Sk).
    Fused so the whole head split / softmax / merge is a single graph node.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.shape != k.shape or q.shape[0] != k.shape[0] \
            or q.shape[2] != k.shape[2] or q.shape[2] % n_heads:
        raise ShapeError(f"attention: shape mismatch q {q.shape}, k {k.shape}, v {v.shape} "
                         f"for {n_heads} heads")
    B, Sq, D = q.shape
    Sk = k.shape[1]
    dh = D // n_heads
    scale = 1.0 / math.sqrt(dh)
    Q = q.data.reshape(B, Sq, n_heads, dh).transpose(0, 2, 1, 3)
    K = k.data.reshape(B, Sk, n_heads, dh).transpose(0, 2, 1, 3)
    V = v.data.reshape(B, Sk, n_heads, dh).transpose(0, 2, 1, 3)
    scores = (Q @ K.transpose(0, 1, 3, 2)) * scale
    if bias is not None:
        scores = scores + np.asarray(bias, dtype=scores.dtype)
    scores -= scores.max(axis=-1, keepdims=True)
    A = np.exp(scores)
    A /= A.sum(axis=-1, keepdims=True)
    out = (A @ V).transpose(0, 2, 1, 3).reshape(B, Sq, D)

    def merge(x, S):
        return x.transpose(0, 2, 1, 3).reshape(B, S, D)

    def fn(g):
        gO = g.reshape(B, Sq, n_heads, dh).transpose(0, 2, 1, 3)
        gA = gO @ V.transpose(0, 1, 3, 2)
        gS = A * (gA - (gA * A).sum(axis=-1, keepdims=True))
        gS *= scale
        gq = merge(gS @ K, Sq) if q.requires_grad else None
        gk = merge(gS.transpose(0, 1, 3, 2) @ Q, Sk) if k.requires_grad else None
        gv = merge(A.transpose(0, 1, 3, 2) @ gO, Sk) if v.requires_grad else None
        return gq, gk, gv

    return make_result(out, (q, k, v), fn, "attention")


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    d = x.shape[-1]
    if weight.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: shape mismatch {x.shape} vs {weight.shape}/{bias.shape}")
    xd = x.data
    inv_d = 1.0 / d
    xc = xd - xd.sum(axis=-1, keepdims=True) * inv_d
    var = np.einsum("...i,...i->...", xc, xc)[..., None] * inv_d
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    wd = weight.data
    out = xhat * wd + bias.data

    def fn(g):
        gw = gb = gx = None
        if weight.requires_grad:
            gw = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * wd
            gx = rstd * (gh - gh.sum(axis=-1, keepdims=True) * inv_d
                         - xhat * (np.einsum("...i,...i->...", gh, xhat)[..., None] * inv_d))
        return gx, gw, gb

    return make_result(out, (x, weight, bias), fn, "layer_norm")


def cross_entropy(logits, targets, weights) -> Tensor:
    """Weighted mean token cross-entropy.

    ``logits`` is (..., V); ``targets`` integer ids and ``weights`` (0/1 mask or
    real weights) share the leading shape.  Only positions with non-zero weight
    contribute; the result is ``sum(w * nll) / sum(w)``.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    w = np.asarray(weights, dtype=logits.data.dtype)
    if t.shape != logits.shape[:-1] or w.shape != t.shape:
        raise ShapeError(f"cross_entropy: shape mismatch logits {logits.shape}, "
                         f"targets {t.shape}, weights {w.shape}")
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: empty valid set")
    V = logits.shape[-1]
    sel = np.flatnonzero(w.reshape(-1))
    flat = logits.data.reshape(-1, V)[sel]
    tw = w.reshape(-1)[sel]
    tt = t.reshape(-1)[sel]
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(len(sel)), tt]
    loss = float((tw * nll).sum() / total)
    shape = logits.shape

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(len(sel)), tt] -= 1.0
        full = np.zeros((int(np.prod(shape[:-1])), V), dtype=p.dtype)
        full[sel] = p * (tw / total)[:, None] * g
        return (full.reshape(shape),)

    return make_result(np.asarray(loss, logits.data.dtype), (logits,), fn, "cross_entropy")
