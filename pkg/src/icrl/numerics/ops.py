"""Differentiable primitives.

Each op computes its result with numpy and, when a tape is active and an input
needs gradients, records a closure mapping the output gradient to input
gradients. Broadcasting is limited to leading batch dimensions: an operand may
have the shape of a trailing suffix of the other operand's shape.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .tensor import ContractError, DimensionError, Tensor, active_tape


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(tape.tracks(p) for p in parents):
        tape.record(t, parents, grad_fn)
    return t


def _check_suffix(big: tuple, small: tuple, op: str) -> None:
    if len(small) > len(big) or big[len(big) - len(small):] != small:
        raise DimensionError(f"{op}: shapes {big} and {small} are not leading-dim broadcastable")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if a.data.ndim >= b.data.ndim:
        _check_suffix(a.shape, b.shape, op)
    else:
        _check_suffix(b.shape, a.shape, op)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is (..., m, k); ``b`` is either (k, n) or (..., k, n) with the same
    leading dims as ``a``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")

    def grad(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit(ad @ bd, (a, b), grad)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise FloatingPointError("softmax received non-finite input")
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (x,), grad)


def causal_softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis of (..., T, T) scores with keys after the query zeroed."""
    xd = x.data
    T = xd.shape[-1]
    if xd.ndim < 2 or xd.shape[-2] != T:
        raise DimensionError(f"causal_softmax expects square trailing dims, got {x.shape}")
    y = np.where(np.triu(np.ones((T, T), dtype=bool), k=1), -np.inf, xd)
    m = y.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("causal_softmax received non-finite input")
    np.subtract(y, m, out=y)
    np.exp(y, out=y)
    np.divide(y, y.sum(axis=-1, keepdims=True), out=y)

    def grad(g):
        # masked probabilities are exactly zero, so their gradient vanishes without a mask
        gx = g * y
        s = gx.sum(axis=-1, keepdims=True)
        gx -= y * s
        return (gx,)

    return _emit(y, (x,), grad)


def causal_attention(q: Tensor, k: Tensor, v: Tensor, block: int = 128) -> Tensor:
    """``causal_softmax(q @ k^T) @ v`` for (..., T, h) inputs, processed in query blocks.

    A query block starting at row r0 only ever sees keys before its last row,
    so the masked upper triangle is mostly never materialised.
    """
    qd, kd, vd = q.data, k.data, v.data
    if not (qd.shape == kd.shape == vd.shape) or qd.ndim < 2:
        raise DimensionError(f"causal_attention needs equal (..., T, h) shapes, got {q.shape}, {k.shape}, {v.shape}")
    T = qd.shape[-2]
    out = np.empty_like(qd)
    probs = []
    for r0 in range(0, T, block):
        r1 = min(r0 + block, T)
        s = qd[..., r0:r1, :] @ np.swapaxes(kd[..., :r1, :], -1, -2)
        diag = s[..., r0:r1]
        diag += np.triu(np.full((r1 - r0, r1 - r0), -np.inf, dtype=s.dtype), k=1)
        m = s.max(axis=-1, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise FloatingPointError("causal_attention received non-finite input")
        np.subtract(s, m, out=s)
        np.exp(s, out=s)
        np.divide(s, s.sum(axis=-1, keepdims=True), out=s)
        out[..., r0:r1, :] = s @ vd[..., :r1, :]
        probs.append((r0, r1, s))

    def grad(g):
        gq, gk, gv = np.zeros_like(qd), np.zeros_like(kd), np.zeros_like(vd)
        for r0, r1, p in probs:
            gc = g[..., r0:r1, :]
            gv[..., :r1, :] += np.swapaxes(p, -1, -2) @ gc
            gs = gc @ np.swapaxes(vd[..., :r1, :], -1, -2)
            gs -= (gs * p).sum(axis=-1, keepdims=True)
            gs *= p
            gq[..., r0:r1, :] = gs @ kd[..., :r1, :]
            gk[..., :r1, :] += np.swapaxes(gs, -1, -2) @ qd[..., r0:r1, :]
        return gq, gk, gv

    return _emit(out, (q, k, v), grad)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then apply gain and bias."""
    xd = x.data
    d = xd.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least 2 features")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine params must have shape ({d},)")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def grad(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _emit(out, (x, gain, bias), grad)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    # tanh approximation
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def grad(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _emit(out, (x,), grad)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    mask = xd > 0
    return _emit(xd * mask, (x,), lambda g: (g * mask,))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")
    td = table.data

    def grad(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (gt,)

    return _emit(td[ids], (table,), grad)


def gather_rows(x: Tensor, batch_idx, pos_idx) -> Tensor:
    """Select ``x[batch_idx[i], pos_idx[i]]`` from a (B, T, d) tensor -> (N, d)."""
    xd = x.data
    bi = np.asarray(batch_idx, dtype=np.int64)
    pi = np.asarray(pos_idx, dtype=np.int64)
    if xd.ndim != 3 or bi.shape != pi.shape or bi.ndim != 1:
        raise DimensionError("gather_rows expects x (B, T, d) and equal-length 1-d index arrays")

    def grad(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, (bi, pi), g)
        return (gx,)

    return _emit(xd[bi, pi], (x,), grad)


def pick(x: Tensor, idx) -> Tensor:
    """Per-row selection ``x[i, idx[i]]`` from an (N, k) tensor -> (N,)."""
    xd = x.data
    idx = np.asarray(idx, dtype=np.int64)
    if xd.ndim != 2 or idx.shape != (xd.shape[0],):
        raise DimensionError(f"pick expects (N, k) and (N,), got {x.shape} and {idx.shape}")
    rows = np.arange(xd.shape[0])

    def grad(g):
        gx = np.zeros_like(xd)
        gx[rows, idx] = g
        return (gx,)

    return _emit(xd[rows, idx], (x,), grad)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; ``mask`` broadcasts over leading dims."""
    mask = np.asarray(mask, dtype=bool)
    _check_suffix(x.shape, mask.shape, "masked_fill")
    keep = ~mask
    out = np.where(mask, x.data.dtype.type(value), x.data)
    return _emit(out, (x,), lambda g: (g * keep,))


def total(x: Tensor) -> Tensor:
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _emit(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def mse(pred: Tensor, target, weights=None) -> Tensor:
    """Weighted mean of squared residuals against a constant target.

    Entries with weight 0 contribute nothing; the mean is over the weight sum.
    """
    td = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if td.shape != pred.shape:
        raise ContractError(f"mse: prediction {pred.shape} and target {td.shape} differ")
    w = np.ones(pred.shape, dtype=pred.dtype) if weights is None else np.asarray(weights, dtype=pred.dtype)
    if w.shape != pred.shape:
        raise ContractError("mse: weight shape differs from prediction shape")
    denom = w.sum()
    if denom <= 0:
        raise ContractError("mse: no positions carry weight")
    r = np.where(w > 0, pred.data - td, 0.0).astype(pred.dtype)
    loss = (w * r * r).sum() / denom
    return _emit(np.asarray(loss, dtype=pred.dtype), (pred,), lambda g: (g * 2.0 * w * r / denom,))
