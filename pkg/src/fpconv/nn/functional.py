"""Differentiable ops with hand-written backward passes.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes, a
python scalar, or a 1-D operand matching the trailing axis (a bias).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fpconv.errors import LabelOutOfRange, ShapeMismatch
from fpconv.nn.tensor import Tensor, as_tensor, make_result

BN_EPS = 1e-5
BN_DECAY = 0.9
LEAKY_SLOPE = 0.1


def _trailing_sum(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data + c, (a,), lambda g: (g,))
    _check_elementwise(a, b, "add")
    bshape = b.shape
    return make_result(a.data + b.data, (a, b), lambda g: (g, _trailing_sum(g, bshape)))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,))
    _check_elementwise(a, b, "mul")
    ad, bd = a.data, b.data
    bshape = b.shape
    return make_result(ad * bd, (a, b), lambda g: (g * bd, _trailing_sum(g * ad, bshape)))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    orig = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


def expand(x: Tensor, n: int) -> Tensor:
    """Repeat ``x`` of shape (M, D) along a new middle axis: (M, n, D)."""
    out = np.broadcast_to(x.data[:, None, :], (x.shape[0], n, x.shape[1]))
    return make_result(np.ascontiguousarray(out), (x,), lambda g: (g.sum(axis=1),))


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return make_result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return mul(sum_all(x), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``(M,K) @ (K,N)``, batched ``(...,M,K) @ (...,K,N)`` with equal batch
    extents, and ``(...,M,K) @ (K,N)`` with a shared right operand.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch extents {a.shape[:-2]} vs {b.shape[:-2]}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2 and a.ndim > 2

    def backward(g):
        da = g @ np.swapaxes(bd, -1, -2)
        if shared:
            db = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            db = np.swapaxes(ad, -1, -2) @ g
        return da, db

    return make_result(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight (+ bias)`` over the trailing axis; ``x`` may have any leading shape."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeMismatch(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    lead = x.shape[:-1]
    xd = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        dx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        dw = xd.T @ g2
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0, bias: Optional[Tensor] = None) -> Tensor:
    """2-D cross-correlation, channels-last.

    ``x`` is (H, W, C_in) or batched (B, H, W, C_in); ``kernel`` is
    (k, k, C_in, C_out). Output extent is H + 2*padding - k + 1. Implemented with
    an im2col gather so the heavy lifting is one GEMM each way.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    B, H, W, C = xd.shape
    kh, kw, kc, cout = kernel.shape
    p = int(padding)
    if kc != C:
        raise ShapeMismatch(f"conv2d: input channels {C} vs kernel {kernel.shape}")
    if kh > H + 2 * p or kw > W + 2 * p:
        raise ShapeMismatch(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * p}x{W + 2 * p}")
    xp = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0))) if p else xd
    Ho, Wo = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B, Ho, Wo, C, kh, kw
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)
    kmat = kernel.data.reshape(kh * kw * C, cout)
    out = cols @ kmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, cout)
    if unbatched:
        out = out[0]

    def backward(g):
        g2 = g.reshape(B * Ho * Wo, cout)
        dk = (cols.T @ g2).reshape(kernel.shape)
        dcols = (g2 @ kmat.T).reshape(B, Ho, Wo, kh, kw, C)
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + Ho, j : j + Wo, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, p : p + H, p : p + W, :] if p else dxp
        if unbatched:
            dx = dx[0]
        if bias is None:
            return dx, dk
        return dx, dk, g2.sum(axis=0)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out, parents, backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,))


class RunningStats:
    """Running mean/variance buffers for batch normalization."""

    def __init__(self, channels: int, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, mean: np.ndarray, var: np.ndarray, decay: float = BN_DECAY) -> None:
        self.mean = decay * self.mean + (1.0 - decay) * mean
        self.var = decay * self.var + (1.0 - decay) * var


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    training: bool,
    running: Optional[RunningStats] = None,
    eps: float = BN_EPS,
) -> Tensor:
    """Normalize the trailing (channel) axis over all leading positions.

    In training mode the batch statistics are used and, when ``running`` is
    given, folded into it with decay 0.9 (unbiased variance). In eval mode
    the running statistics define a fixed affine map.
    """
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeMismatch(f"batch_norm: channels {C} vs gamma {gamma.shape}, beta {beta.shape}")
    shape = x.shape
    xd = x.data.reshape(-1, C)
    n = xd.shape[0]
    gd = gamma.data
    if training:
        mu = xd.mean(axis=0)
        xc = xd - mu
        var = (xc * xc).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        if running is not None:
            unbiased = var * (n / (n - 1)) if n > 1 else var
            running.update(mu, unbiased)

        def backward(g):
            g2 = g.reshape(-1, C)
            dgamma = (g2 * xhat).sum(axis=0)
            dbeta = g2.sum(axis=0)
            dxhat = g2 * gd
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            return dx.reshape(shape), dgamma, dbeta

    else:
        if running is None:
            raise ValueError("eval-mode batch_norm needs running statistics")
        inv_std = (1.0 / np.sqrt(running.var + eps)).astype(xd.dtype)
        xhat = (xd - running.mean.astype(xd.dtype)) * inv_std

        def backward(g):
            g2 = g.reshape(-1, C)
            return (
                (g2 * (gd * inv_std)).reshape(shape),
                (g2 * xhat).sum(axis=0),
                g2.sum(axis=0),
            )

    out = (xhat * gd + beta.data).reshape(shape)
    return make_result(out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward)


def max_reduce(x: Tensor, axis: int = 0):
    """Max along ``axis``; returns ``(values, argmax)``.

    The gradient goes to the first index attaining the maximum.
    """
    if x.shape[axis] < 1:
        raise ShapeMismatch("max_reduce over an empty axis")
    ax = axis % x.ndim
    arg = np.argmax(x.data, axis=ax)
    vals = np.take_along_axis(x.data, np.expand_dims(arg, ax), axis=ax)
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(dx, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (dx,)

    return make_result(np.squeeze(vals, axis=ax), (x,), backward), arg


def segment_max(x: Tensor, offsets: Sequence[int]):
    """Per-segment max over rows of ``x`` (P, C); segment s spans rows offsets[s]:offsets[s+1]."""
    offsets = np.asarray(offsets)
    if np.any(np.diff(offsets) < 1):
        raise ShapeMismatch("segment_max: empty segment")
    rows = []
    for s in range(len(offsets) - 1):
        seg = x.data[offsets[s] : offsets[s + 1]]
        rows.append(offsets[s] + np.argmax(seg, axis=0))
    arg = np.stack(rows)  # S, C
    cols = np.arange(x.shape[1])
    vals = x.data[arg, cols]
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape, dtype=g.dtype)
        np.add.at(dx, (arg, np.broadcast_to(cols, arg.shape)), g)
        return (dx,)

    return make_result(vals, (x,), backward), arg


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    C = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        bad = labels[(labels < 0) | (labels >= C)][0]
        raise LabelOutOfRange(f"label {int(bad)} outside [0, {C})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    nll = lse - z[rows, labels]
    B = labels.size

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / B),)

    return make_result(np.asarray(nll.mean(), dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# indexing
# ---------------------------------------------------------------------------


def _scatter_rows(n_rows: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    out = np.zeros((n_rows, values.shape[-1]), dtype=values.dtype)
    np.add.at(out, idx.ravel(), values.reshape(-1, values.shape[-1]))
    return out


def gather(x: Tensor, idx) -> Tensor:
    """Row gather: ``x[idx]`` for ``x`` of shape (P, C) and integer ``idx`` of any shape."""
    idx = np.asarray(idx)
    P = x.shape[0]
    return make_result(x.data[idx], (x,), lambda g: (_scatter_rows(P, idx, g),))


def weighted_gather(x: Tensor, idx, weights) -> Tensor:
    """``out[t] = sum_k weights[t, k] * x[idx[t, k]]`` with constant weights."""
    idx = np.asarray(idx)
    w = np.asarray(weights, dtype=x.dtype)
    P = x.shape[0]
    out = np.einsum("tk,tkc->tc", w, x.data[idx])

    def backward(g):
        return (_scatter_rows(P, idx, w[:, :, None] * g[:, None, :]),)

    return make_result(out, (x,), backward)
