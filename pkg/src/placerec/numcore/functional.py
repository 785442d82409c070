"""Fused kernels: convolution, GeM pooling and single-head self-attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from placerec.errors import DataError, NumericError
from placerec.numcore.tensor import (
    Tensor,
    _make,
    as_tensor,
    add,
    matmul,
    softmax,
    swap_last,
)


@dataclass
class GemParams:
    """Initial exponent and clamp floor for generalized-mean pooling."""

    p: float = 3.0
    eps: float = 1e-6

    def __post_init__(self):
        if not self.p > 0:
            raise ValueError("GeM exponent must be positive")
        if not self.eps > 0:
            raise ValueError("GeM eps must be positive")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on channels-last input.

    x: (N, H, W, C); weight: (F, C, kh, kw); bias: (F,). Returns (N, Ho, Wo, F).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    n, h, w, c = x.shape
    f, c2, kh, kw = weight.shape
    if c != c2:
        raise DataError(f"conv2d channel mismatch: input has {c}, kernel expects {c2}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DataError(f"spatial size {h}x{w} collapses below 1 under this convolution")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, : stride * ho : stride, : stride * wo : stride]
    cols = win.reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, c * kh * kw)
    out = cols @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(n, ho, wo, f)

    def bw(g):
        g2 = g.reshape(-1, f)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[..., i, j]
            gx = dxp[:, padding : padding + h, padding : padding + w, :] if padding else dxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _make(out, parents, bw, "conv2d")


def gem_pool(features, p, eps: float = 1e-6, axis: int = -1) -> Tensor:
    """Generalized-mean pooling along ``axis``.

    out = (mean_s max(x_s, eps)^p)^(1/p), differentiable in ``features`` and
    the (scalar) exponent ``p``. p=1 is average pooling; p->inf tends to max.
    """
    x = as_tensor(features)
    p = as_tensor(p)
    if p.size != 1:
        raise ValueError("GeM exponent must be a scalar")
    axis = axis % x.ndim
    s = x.shape[axis]
    if s == 0:
        raise DataError("gem_pool over an empty axis")
    pv = float(p.data.reshape(-1)[0])
    if not pv > 0:
        raise NumericError(f"GeM exponent must stay positive, got {pv}")

    active = x.data > eps
    xc = np.where(active, x.data, eps)
    logx = np.log(xc)
    # x^p = exp(p log x); shift by the row max for overflow safety at large p
    z = pv * logx
    zmax = z.max(axis=axis, keepdims=True)
    w = np.exp(z - zmax)
    # sorted summation: result does not depend on the order along ``axis``
    m_shift = np.sort(w, axis=axis).sum(axis=axis, keepdims=True) / s
    log_m = np.log(m_shift) + zmax
    y = np.exp(log_m / pv)
    out = np.squeeze(y, axis=axis)

    def bw(g):
        g = np.expand_dims(g, axis)
        # weights w / sum(w) equal x^p / sum(x^p)
        frac = w / (w.sum(axis=axis, keepdims=True))
        gx = None
        if x.requires_grad:
            # dy/dx_s = y * x_s^(p-1) / sum(x^p) = y * frac_s / x_s
            gx = g * y * frac / xc * active
        gp = None
        if p.requires_grad:
            weighted_log = (frac * logx).sum(axis=axis, keepdims=True)
            dy_dp = y * (weighted_log / pv - log_m / (pv * pv))
            gp = np.asarray((g * dy_dp).sum()).reshape(p.shape)
        return gx, gp

    return _make(out, (x, p), bw, "gem_pool")


def self_attention(x, w_q, w_k, w_v) -> Tensor:
    """Single-head scaled dot-product self-attention with a residual path.

    x: (..., K, E). Row-vector convention: Q = x W_q, and
    out = x + softmax(Q K^T / sqrt(E)) V.
    """
    x = as_tensor(x)
    e = x.shape[-1]
    for name, wm in (("W_q", w_q), ("W_k", w_k), ("W_v", w_v)):
        if as_tensor(wm).shape != (e, e):
            raise ValueError(f"{name} must be {e}x{e}, got {as_tensor(wm).shape}")
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError("self_attention needs at least one input embedding")
    q = matmul(x, w_q)
    k = matmul(x, w_k)
    v = matmul(x, w_v)
    scores = matmul(q, swap_last(k)) * (1.0 / np.sqrt(e))
    attn = softmax(scores, axis=-1)
    return add(x, matmul(attn, v))
