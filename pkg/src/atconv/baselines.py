"""Reference operators the adaptive one is measured against.

All three share the operator protocol the analysis code relies on:
``forward(x)``, ``forward_cached(x)`` and ``input_backward(gy, cache)``.

- StaticConv: dense k x k convolution, zero padding floor(k/2), stride 1.
  Its Jacobian w.r.t. the input is the weights themselves, scattered over
  the k-neighborhood, independent of the input.
- StaticDepthwise: one static k x k kernel per channel.
- ToySelfAttention: single-head dot-product attention over the flattened
  token grid with a temperature, small enough to differentiate through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ArgumentError, DimensionError, StateError
from .primitives import (
    LinearCache, SoftmaxCache,
    conv1x1_backward, conv1x1_forward,
    linear_backward, linear_forward,
    softmax_backward, softmax_forward,
)
from .rng import Rng
from .tensor import as_matrix, as_tensor4, as_vector, ensure_finite, flop_counter


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b_, c_, h_, w_ = x.shape
    xp = np.zeros((b_, c_, h_ + 2 * p, w_ + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h_, p:p + w_] = x
    return xp


def _check_kernel(w: np.ndarray, name: str) -> int:
    k = w.shape[-1]
    if w.shape[-2] != k:
        raise DimensionError(f"{name} taps must be square, got {w.shape}")
    if k % 2 == 0:
        raise ArgumentError(f"{name} side must be odd, got {k}")
    return k


# ======================================================================
# dense static convolution
# ======================================================================

class StaticConvCache(NamedTuple):
    x: np.ndarray
    delegate: Optional[object]  # Conv1x1Cache when k == 1


class StaticConv:
    """y[b,o,h,w] = sum_{i,u,v} w[o,i,u,v] * xpad[b,i,h+u,w+v] + bias[o]"""

    def __init__(self, w: np.ndarray, bias: Optional[np.ndarray] = None):
        w = np.asarray(w)
        if w.ndim != 4:
            raise DimensionError(f"weights must be (C_out, C_in, k, k), got {w.shape}")
        self.k = _check_kernel(w, "static conv kernel")
        self.w = np.ascontiguousarray(w)
        self.bias = None if bias is None else as_vector(bias, w.shape[0], "bias")

    @classmethod
    def init(cls, rng: Rng, c_out: int, c_in: int, k: int = 3, dtype=np.float64):
        bound = math.sqrt(1.0 / (c_in * k * k))
        return cls(rng.uniform(-bound, bound, (c_out, c_in, k, k), dtype),
                   np.zeros(c_out, dtype=dtype))

    def forward(self, x):
        return self.forward_cached(x)[0]

    def forward_cached(self, x):
        x = as_tensor4(x)
        c_in = self.w.shape[1]
        if x.shape[1] != c_in:
            raise DimensionError(f"input has {x.shape[1]} channels, weights expect {c_in}")
        if self.k == 1:
            # a 1-tap kernel is exactly a pointwise conv; reuse that path
            y, sub = conv1x1_forward(x, self.w[:, :, 0, 0], self.bias)
            return y, StaticConvCache(x, sub)
        xp = _pad_hw(x, self.k // 2)
        windows = sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        y = np.einsum("oiuv,bihwuv->bohw", self.w, windows, optimize=True)
        if self.bias is not None:
            y = y + self.bias[None, :, None, None]
        b_, _, h_, w_ = x.shape
        flop_counter.add(2 * b_ * h_ * w_ * self.w.size)
        ensure_finite(y, "static_conv")
        return np.ascontiguousarray(y), StaticConvCache(x, None)

    def backward(self, gy, cache: StaticConvCache):
        if cache is None:
            raise StateError("static conv backward needs the forward cache")
        if cache.delegate is not None:
            gx, gw11, gb = conv1x1_backward(gy, cache.delegate)
            return gx, gw11[:, :, None, None], gb
        gy = as_tensor4(gy, "gy")
        x = cache.x
        b_, c_in, h_, w_ = x.shape
        c_out = self.w.shape[0]
        if gy.shape != (b_, c_out, h_, w_):
            raise DimensionError(f"gy shape {gy.shape} != output shape {(b_, c_out, h_, w_)}")
        k, p = self.k, self.k // 2
        xp = _pad_hw(x, p)
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))
        gw = np.einsum("bohw,bihwuv->oiuv", gy, windows, optimize=True)
        gxp = np.zeros_like(xp)
        for u in range(k):
            for t in range(k):
                gxp[:, :, u:u + h_, t:t + w_] += np.einsum(
                    "oi,bohw->bihw", self.w[:, :, u, t], gy)
        gx = np.ascontiguousarray(gxp[:, :, p:p + h_, p:p + w_])
        gb = gy.sum(axis=(0, 2, 3)) if self.bias is not None else None
        return gx, gw, gb

    def input_backward(self, gy, cache):
        return self.backward(gy, cache)[0]


# ======================================================================
# static depthwise convolution
# ======================================================================

class StaticDepthwiseCache(NamedTuple):
    x: np.ndarray


class StaticDepthwise:
    """y[b,c,h,w] = sum_{u,v} w[c,u,v] * xpad[b,c,h+u,w+v]"""

    def __init__(self, w: np.ndarray):
        w = np.asarray(w)
        if w.ndim != 3:
            raise DimensionError(f"weights must be (C, k, k), got {w.shape}")
        self.k = _check_kernel(w, "depthwise kernel")
        self.w = np.ascontiguousarray(w)

    @classmethod
    def init(cls, rng: Rng, channels: int, k: int = 3, dtype=np.float64):
        bound = math.sqrt(1.0 / (k * k))
        return cls(rng.uniform(-bound, bound, (channels, k, k), dtype))

    def forward(self, x):
        return self.forward_cached(x)[0]

    def forward_cached(self, x):
        x = as_tensor4(x)
        if x.shape[1] != self.w.shape[0]:
            raise DimensionError(
                f"input has {x.shape[1]} channels, weights expect {self.w.shape[0]}")
        xp = _pad_hw(x, self.k // 2)
        windows = sliding_window_view(xp, (self.k, self.k), axis=(2, 3))
        y = np.einsum("cuv,bchwuv->bchw", self.w, windows, optimize=True)
        b_, c_, h_, w_ = x.shape
        flop_counter.add(2 * b_ * h_ * w_ * self.w.size)
        ensure_finite(y, "static_depthwise")
        return np.ascontiguousarray(y), StaticDepthwiseCache(x)

    def backward(self, gy, cache: StaticDepthwiseCache):
        if cache is None:
            raise StateError("static depthwise backward needs the forward cache")
        gy = as_tensor4(gy, "gy")
        x = cache.x
        if gy.shape != x.shape:
            raise DimensionError(f"gy shape {gy.shape} != output shape {x.shape}")
        b_, c_, h_, w_ = x.shape
        k, p = self.k, self.k // 2
        xp = _pad_hw(x, p)
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))
        gw = np.einsum("bchw,bchwuv->cuv", gy, windows, optimize=True)
        gxp = np.zeros_like(xp)
        for u in range(k):
            for t in range(k):
                gxp[:, :, u:u + h_, t:t + w_] += self.w[:, u, t][None, :, None, None] * gy
        gx = np.ascontiguousarray(gxp[:, :, p:p + h_, p:p + w_])
        return gx, gw

    def input_backward(self, gy, cache):
        return self.backward(gy, cache)[0]


# ======================================================================
# toy single-head self-attention
# ======================================================================

@dataclass
class ToySAParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    tau: float

    @classmethod
    def init(cls, rng: Rng, channels: int, d: Optional[int] = None,
             tau: Optional[float] = None, dtype=np.float64) -> "ToySAParams":
        d = channels if d is None else int(d)
        bound = math.sqrt(1.0 / channels)
        p = cls(
            w_q=rng.uniform(-bound, bound, (d, channels), dtype),
            w_k=rng.uniform(-bound, bound, (d, channels), dtype),
            w_v=rng.uniform(-bound, bound, (d, channels), dtype),
            w_o=rng.uniform(-math.sqrt(1.0 / d), math.sqrt(1.0 / d), (channels, d), dtype),
            tau=float(tau) if tau is not None else math.sqrt(d),
        )
        p.validate()
        return p

    def validate(self) -> None:
        self.w_q = as_matrix(self.w_q, "w_q")
        self.w_k = as_matrix(self.w_k, "w_k")
        self.w_v = as_matrix(self.w_v, "w_v")
        self.w_o = as_matrix(self.w_o, "w_o")
        d, c = self.w_q.shape
        if self.w_k.shape != (d, c) or self.w_v.shape != (d, c):
            raise DimensionError("w_q, w_k, w_v must share shape (d, C)")
        if self.w_o.shape != (c, d):
            raise DimensionError(f"w_o must be ({c}, {d}), got {self.w_o.shape}")
        if not (self.tau > 0):
            raise ArgumentError(f"temperature must be positive, got {self.tau}")


class ToySACache(NamedTuple):
    xt: np.ndarray          # (B, N, C)
    q_cache: LinearCache
    k_cache: LinearCache
    v_cache: LinearCache
    o_cache: LinearCache
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    alpha: np.ndarray       # (B, N, N)
    sm_cache: SoftmaxCache
    shape: tuple


class ToySelfAttention:
    """out = W_o (alpha V), alpha = softmax(Q K^T / tau) row-wise.

    Tokens are the H*W spatial positions in row-major order; there is no
    positional term, so the operator is permutation-equivariant over
    tokens. Desk-scale only: the attention map is N x N.
    """

    def __init__(self, params: ToySAParams):
        params.validate()
        self.params = params

    def forward(self, x):
        return self.forward_cached(x)[0]

    def forward_cached(self, x):
        x = as_tensor4(x)
        p = self.params
        b_, c_, h_, w_ = x.shape
        if c_ != p.w_q.shape[1]:
            raise DimensionError(f"input has {c_} channels, weights expect {p.w_q.shape[1]}")
        n = h_ * w_
        xt = np.ascontiguousarray(x.reshape(b_, c_, n).transpose(0, 2, 1))
        q, qc = linear_forward(xt, p.w_q)
        k, kc = linear_forward(xt, p.w_k)
        v, vc = linear_forward(xt, p.w_v)
        scores = np.matmul(q, k.transpose(0, 2, 1)) / p.tau
        d = q.shape[-1]
        flop_counter.add(2 * b_ * n * n * d)
        alpha, smc = softmax_forward(scores, axis=-1)
        ytok = np.matmul(alpha, v)
        flop_counter.add(2 * b_ * n * n * d)
        out_t, oc = linear_forward(ytok, p.w_o)
        y = np.ascontiguousarray(out_t.transpose(0, 2, 1).reshape(b_, c_, h_, w_))
        ensure_finite(y, "toy_self_attention")
        return y, ToySACache(xt, qc, kc, vc, oc, q, k, v, alpha, smc, x.shape)

    def attention(self, x) -> np.ndarray:
        """The (B, N, N) attention map for ``x``."""
        return self.forward_cached(x)[1].alpha

    def backward(self, gy, cache: ToySACache):
        if cache is None:
            raise StateError("toy attention backward needs the forward cache")
        gy = as_tensor4(gy, "gy")
        b_, c_, h_, w_ = cache.shape
        if gy.shape != cache.shape:
            raise DimensionError(f"gy shape {gy.shape} != output shape {cache.shape}")
        p = self.params
        n = h_ * w_
        g_out_t = np.ascontiguousarray(gy.reshape(b_, c_, n).transpose(0, 2, 1))
        g_ytok, gw_o, _ = linear_backward(g_out_t, cache.o_cache)
        g_alpha = np.matmul(g_ytok, cache.v.transpose(0, 2, 1))
        g_v = np.matmul(cache.alpha.transpose(0, 2, 1), g_ytok)
        g_scores = softmax_backward(g_alpha, cache.sm_cache) / p.tau
        g_q = np.matmul(g_scores, cache.k)
        g_k = np.matmul(g_scores.transpose(0, 2, 1), cache.q)
        gxt, gw_q, _ = linear_backward(g_q, cache.q_cache)
        gxt2, gw_k, _ = linear_backward(g_k, cache.k_cache)
        gxt3, gw_v, _ = linear_backward(g_v, cache.v_cache)
        gxt = gxt + gxt2 + gxt3
        gx = np.ascontiguousarray(gxt.transpose(0, 2, 1).reshape(b_, c_, h_, w_))
        grads = {"w_q": gw_q, "w_k": gw_k, "w_v": gw_v, "w_o": gw_o}
        return gx, grads

    def input_backward(self, gy, cache):
        return self.backward(gy, cache)[0]


class IdentityOp:
    """Pass-through operator; handy as a ground truth in map tests."""

    def forward(self, x):
        return as_tensor4(x)

    def forward_cached(self, x):
        x = as_tensor4(x)
        return x, x.shape

    def input_backward(self, gy, cache):
        gy = as_tensor4(gy, "gy")
        if gy.shape != cache:
            raise DimensionError(f"gy shape {gy.shape} != cached shape {cache}")
        return gy


# ======================================================================
# Jacobian probe
# ======================================================================

def conv_jacobian_probe(op, x, position: tuple) -> np.ndarray:
    """Input Jacobian slice of ``op`` at one output position.

    Returns J with J[c_out, c_in, h, w] = d y[0, c_out, ph, pw] /
    d x[0, c_in, h, w], computed with one backward pass per output
    channel. For a static convolution this slice is the kernel weights
    scattered over the neighborhood of ``position`` and zero elsewhere,
    whatever the input; operators with input-dependent kernels produce
    input-dependent slices.
    """
    x = as_tensor4(x)
    ph, pw = (int(position[0]), int(position[1]))
    _, _, h_, w_ = x.shape
    if not (0 <= ph < h_ and 0 <= pw < w_):
        raise ArgumentError(f"position {position} outside spatial extent {(h_, w_)}")
    y, cache = op.forward_cached(x)
    c_out = y.shape[1]
    rows = []
    for co in range(c_out):
        gy = np.zeros_like(y)
        gy[0, co, ph, pw] = 1.0
        rows.append(op.input_backward(gy, cache)[0])
    return np.stack(rows, axis=0)
