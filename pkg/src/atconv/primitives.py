"""Differentiable building blocks: pointwise convolution, adaptive average
pooling, dense layers, and the usual nonlinearities.

Every primitive comes in three parts: a plain forward, a cached forward
(``*_forward``) returning the state its backward needs, and a hand-derived
backward (``*_backward``) consuming that cache. There is no tape; composite
operators chain these calls explicitly and keep their own cache objects.

Backward passes return gradients in the same order as the forward's
differentiable arguments and None for absent optional biases.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from .errors import DimensionError, ArgumentError, StateError
from .tensor import as_tensor4, as_matrix, as_vector, ensure_finite, flop_counter

INV_SQRT2 = float(1.0 / np.sqrt(2.0))
INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def _need_cache(cache, op: str):
    if cache is None:
        raise StateError(f"{op}_backward needs the cache from {op}_forward")
    return cache


# ======================================================================
# erf (rational minimax approximation, Cody 1969 coefficient set)
# ======================================================================

_ERF_A = (3.16112374387056560e0, 1.13864154151050156e2, 3.77485237685302021e2,
          3.20937758913846947e3, 1.85777706184603153e-1)
_ERF_B = (2.36012909523441209e1, 2.44024637934444173e2, 1.28261652607737228e3,
          2.84423683343917062e3)
_ERF_C = (5.64188496988670089e-1, 8.88314979438837594e0, 6.61191906371416295e1,
          2.98635138197400131e2, 8.81952221241769090e2, 1.71204761263407058e3,
          2.05107837782607147e3, 1.23033935479799725e3, 2.15311535474403846e-8)
_ERF_D = (1.57449261107098347e1, 1.17693950891312499e2, 5.37181101862009858e2,
          1.62138957456669019e3, 3.29079923573345963e3, 4.36261909014324716e3,
          3.43936767414372164e3, 1.23033935480374942e3)
_ERF_P = (3.05326634961232344e-1, 3.60344899949804439e-1, 1.25781726111229246e-1,
          1.60837851487422766e-2, 6.58749161529837803e-4, 1.63153871373020978e-2)
_ERF_Q = (2.56852019228982242e0, 1.87295284992346047e0, 5.27905102951428412e-1,
          6.05183413124413191e-2, 2.33520497626869185e-3)
_INV_SQRT_PI = 5.6418958354775628695e-1


def erf(x: np.ndarray) -> np.ndarray:
    """Error function via a three-region rational minimax fit.

    Absolute error is below 1e-15 everywhere, comfortably inside the
    1e-7 budget the gelu contract asks for. Evaluated in float64 and cast
    back to the input dtype.
    """
    x = np.asarray(x)
    xd = x.astype(np.float64, copy=False)
    y = np.abs(xd)
    out = np.empty_like(xd)

    m1 = y <= 0.46875
    if m1.any():
        z = xd * xd
        num = _ERF_A[4] * z
        den = z.copy()
        for i in range(3):
            num = (num + _ERF_A[i]) * z
            den = (den + _ERF_B[i]) * z
        out = np.where(m1, xd * (num + _ERF_A[3]) / (den + _ERF_B[3]), out)

    m2 = (y > 0.46875) & (y <= 4.0)
    if m2.any():
        ys = np.where(m2, y, 1.0)
        num = _ERF_C[8] * ys
        den = ys.copy()
        for i in range(7):
            num = (num + _ERF_C[i]) * ys
            den = (den + _ERF_D[i]) * ys
        r = (num + _ERF_C[7]) / (den + _ERF_D[7])
        # split exp(-y^2) to keep the argument exact in the high bits
        ysq = np.floor(ys * 16.0) / 16.0
        r = np.exp(-ysq * ysq) * np.exp(-(ys - ysq) * (ys + ysq)) * r
        out = np.where(m2, np.sign(xd) * (1.0 - r), out)

    m3 = y > 4.0
    if m3.any():
        ys = np.where(m3, y, 5.0)
        z = 1.0 / (ys * ys)
        num = _ERF_P[5] * z
        den = z.copy()
        for i in range(4):
            num = (num + _ERF_P[i]) * z
            den = (den + _ERF_Q[i]) * z
        r = z * (num + _ERF_P[4]) / (den + _ERF_Q[4])
        r = (_INV_SQRT_PI - r) / ys
        ysq = np.floor(ys * 16.0) / 16.0
        r = np.exp(-ysq * ysq) * np.exp(-(ys - ysq) * (ys + ysq)) * r
        out = np.where(m3, np.sign(xd) * (1.0 - r), out)

    return out.astype(x.dtype, copy=False)


# ======================================================================
# pointwise (1x1) convolution: per-pixel channel mixing
# ======================================================================

class Conv1x1Cache(NamedTuple):
    x: np.ndarray
    w: np.ndarray
    has_bias: bool


def conv1x1(x: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    y, _ = conv1x1_forward(x, w, bias)
    return y


def conv1x1_forward(x, w, bias=None):
    """y[b, o, h, w] = sum_i w[o, i] * x[b, i, h, w] (+ bias[o])."""
    x = as_tensor4(x)
    w = as_matrix(w)
    b_, c_in, h_, w_ = x.shape
    c_out, c_in_w = w.shape
    if c_in_w != c_in:
        raise DimensionError(f"weight columns ({c_in_w}) != input channels ({c_in})")
    if bias is not None:
        bias = as_vector(bias, c_out, "bias")
        if bias.dtype != x.dtype:
            bias = bias.astype(x.dtype)
    if w.dtype != x.dtype:
        w = w.astype(x.dtype)
    n = h_ * w_
    y = np.matmul(w, x.reshape(b_, c_in, n)).reshape(b_, c_out, h_, w_)
    if bias is not None:
        y = y + bias[None, :, None, None]
    flop_counter.add(2 * b_ * n * c_out * c_in)
    ensure_finite(y, "conv1x1")
    return np.ascontiguousarray(y), Conv1x1Cache(x, w, bias is not None)


def conv1x1_backward(gy, cache: Conv1x1Cache):
    cache = _need_cache(cache, "conv1x1")
    gy = as_tensor4(gy, "gy")
    x, w = cache.x, cache.w
    b_, c_in, h_, w_ = x.shape
    c_out = w.shape[0]
    if gy.shape != (b_, c_out, h_, w_):
        raise DimensionError(f"gy shape {gy.shape} != output shape {(b_, c_out, h_, w_)}")
    n = h_ * w_
    gyr = gy.reshape(b_, c_out, n)
    xr = x.reshape(b_, c_in, n)
    gx = np.matmul(w.T, gyr).reshape(b_, c_in, h_, w_)
    gw = np.einsum("bon,bin->oi", gyr, xr)
    gb = gy.sum(axis=(0, 2, 3)) if cache.has_bias else None
    return np.ascontiguousarray(gx), np.ascontiguousarray(gw), gb


# ======================================================================
# adaptive average pooling to a k x k grid
# ======================================================================

class PoolCache(NamedTuple):
    in_shape: tuple
    h_bounds: tuple
    w_bounds: tuple
    dtype: np.dtype


def _pool_bounds(size: int, k: int) -> tuple:
    # output cell i averages input rows [floor(i*size/k), ceil((i+1)*size/k))
    return tuple((i * size // k, -((i + 1) * size // -k)) for i in range(k))


def adaptive_avg_pool(x: np.ndarray, k: int) -> np.ndarray:
    y, _ = adaptive_avg_pool_forward(x, k)
    return y


def adaptive_avg_pool_forward(x, k: int):
    """Average the input over a k x k grid of (possibly overlapping) windows.

    Window bounds follow the floor/ceil rule above, which tiles the input
    exactly when k divides the side and degrades gracefully otherwise.
    """
    x = as_tensor4(x)
    b_, c_, h_, w_ = x.shape
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ArgumentError(f"pool grid size must be a positive int, got {k!r}")
    if k > min(h_, w_):
        raise DimensionError(f"pool grid {k} exceeds spatial extent {min(h_, w_)}")
    hb = _pool_bounds(h_, k)
    wb = _pool_bounds(w_, k)
    y = np.empty((b_, c_, k, k), dtype=x.dtype)
    adds = 0
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            y[:, :, i, j] = x[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
            adds += (h1 - h0) * (w1 - w0)
    flop_counter.add(b_ * c_ * adds)
    ensure_finite(y, "adaptive_avg_pool")
    return y, PoolCache(x.shape, hb, wb, x.dtype)


def adaptive_avg_pool_backward(gy, cache: PoolCache):
    cache = _need_cache(cache, "adaptive_avg_pool")
    gy = as_tensor4(gy, "gy")
    b_, c_, h_, w_ = cache.in_shape
    k = len(cache.h_bounds)
    if gy.shape != (b_, c_, k, k):
        raise DimensionError(f"gy shape {gy.shape} != pooled shape {(b_, c_, k, k)}")
    gx = np.zeros(cache.in_shape, dtype=cache.dtype)
    for i, (h0, h1) in enumerate(cache.h_bounds):
        for j, (w0, w1) in enumerate(cache.w_bounds):
            area = (h1 - h0) * (w1 - w0)
            gx[:, :, h0:h1, w0:w1] += gy[:, :, i, j][:, :, None, None] / area
    return gx


# ======================================================================
# dense layer over the last axis
# ======================================================================

class LinearCache(NamedTuple):
    x: np.ndarray
    w: np.ndarray
    has_bias: bool


def linear(x, w, bias=None):
    y, _ = linear_forward(x, w, bias)
    return y


def linear_forward(x, w, bias=None):
    """y[..., m] = sum_n w[m, n] * x[..., n] (+ bias[m])."""
    x = np.asarray(x)
    w = as_matrix(w)
    if x.ndim < 1:
        raise DimensionError("linear input must have at least 1 axis")
    m, n = w.shape
    if x.shape[-1] != n:
        raise DimensionError(f"input last axis {x.shape[-1]} != weight columns {n}")
    if bias is not None:
        bias = as_vector(bias, m, "bias")
    y = x @ w.T
    if bias is not None:
        y = y + bias
    flop_counter.add(2 * m * n * int(np.prod(x.shape[:-1], dtype=np.int64)))
    ensure_finite(y, "linear")
    return y, LinearCache(x, w, bias is not None)


def linear_backward(gy, cache: LinearCache):
    cache = _need_cache(cache, "linear")
    gy = np.asarray(gy)
    x, w = cache.x, cache.w
    m, n = w.shape
    if gy.shape != x.shape[:-1] + (m,):
        raise DimensionError(f"gy shape {gy.shape} != output shape {x.shape[:-1] + (m,)}")
    gx = gy @ w
    gyr = gy.reshape(-1, m)
    xr = x.reshape(-1, n)
    gw = gyr.T @ xr
    gb = gyr.sum(axis=0) if cache.has_bias else None
    return gx, gw, gb


# ======================================================================
# nonlinearities
# ======================================================================

class GeluCache(NamedTuple):
    x: np.ndarray


def gelu(x):
    y, _ = gelu_forward(x)
    return y


def gelu_forward(x):
    """y = 0.5 * x * (1 + erf(x / sqrt(2))), the Gaussian-CDF gate."""
    x = np.asarray(x)
    y = 0.5 * x * (1.0 + erf(x * INV_SQRT2))
    ensure_finite(y, "gelu")
    return y, GeluCache(x)


def gelu_backward(gy, cache: GeluCache):
    cache = _need_cache(cache, "gelu")
    x = cache.x
    gy = np.asarray(gy)
    if gy.shape != x.shape:
        raise DimensionError(f"gy shape {gy.shape} != input shape {x.shape}")
    cdf = 0.5 * (1.0 + erf(x * INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * INV_SQRT_2PI
    return gy * (cdf + x * pdf)


class SigmoidCache(NamedTuple):
    y: np.ndarray


def sigmoid(x):
    y, _ = sigmoid_forward(x)
    return y


def sigmoid_forward(x):
    """Logistic gate, evaluated on the non-overflowing branch per sign."""
    x = np.asarray(x)
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))
    y = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    ensure_finite(y, "sigmoid")
    return y, SigmoidCache(y)


def sigmoid_backward(gy, cache: SigmoidCache):
    cache = _need_cache(cache, "sigmoid")
    y = cache.y
    gy = np.asarray(gy)
    if gy.shape != y.shape:
        raise DimensionError(f"gy shape {gy.shape} != output shape {y.shape}")
    return gy * y * (1.0 - y)


class SoftmaxCache(NamedTuple):
    y: np.ndarray
    axis: int


def softmax(x, axis: int = -1):
    y, _ = softmax_forward(x, axis)
    return y


def softmax_forward(x, axis: int = -1):
    """Max-subtracted exponential normalization along ``axis``."""
    x = np.asarray(x)
    if x.ndim == 0:
        raise DimensionError("softmax input must have at least 1 axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    ensure_finite(y, "softmax")
    return y, SoftmaxCache(y, axis)


def softmax_backward(gy, cache: SoftmaxCache):
    cache = _need_cache(cache, "softmax")
    y, axis = cache.y, cache.axis
    gy = np.asarray(gy)
    if gy.shape != y.shape:
        raise DimensionError(f"gy shape {gy.shape} != output shape {y.shape}")
    dot = (gy * y).sum(axis=axis, keepdims=True)
    return (gy - dot) * y


# ======================================================================
# layer norm over the channel axis
# ======================================================================

class LayerNormCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray
    gain: np.ndarray
    axis: int


def layer_norm(x, gain, offset, eps: float = 1e-6):
    y, _ = layer_norm_forward(x, gain, offset, eps)
    return y


def layer_norm_forward(x, gain, offset, eps: float = 1e-6):
    """Normalize to zero mean / unit variance, then rescale and shift.

    For a (B, C, H, W) input the statistics run over the channel axis at
    each spatial position; a bare 1-D input is normalized whole. Variance
    is the population variance (divide by C).
    """
    x = np.asarray(x)
    if x.ndim == 4:
        axis = 1
    elif x.ndim == 1:
        axis = 0
    else:
        raise DimensionError(f"layer_norm expects a 4-D or 1-D input, got shape {x.shape}")
    if eps <= 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    c = x.shape[axis]
    gain = as_vector(gain, c, "gain")
    offset = as_vector(offset, c, "offset")
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    shape = [1] * x.ndim
    shape[axis] = c
    y = gain.reshape(shape) * xhat + offset.reshape(shape)
    ensure_finite(y, "layer_norm")
    return y, LayerNormCache(xhat, inv_std, gain, axis)


def layer_norm_backward(gy, cache: LayerNormCache):
    cache = _need_cache(cache, "layer_norm")
    xhat, inv_std, gain, axis = cache
    gy = np.asarray(gy)
    if gy.shape != xhat.shape:
        raise DimensionError(f"gy shape {gy.shape} != input shape {xhat.shape}")
    shape = [1] * xhat.ndim
    shape[axis] = gain.shape[0]
    g = gain.reshape(shape)
    sum_axes = tuple(i for i in range(xhat.ndim) if i != axis)
    ggain = (gy * xhat).sum(axis=sum_axes)
    goffset = gy.sum(axis=sum_axes)
    gxhat = gy * g
    m1 = gxhat.mean(axis=axis, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axis, keepdims=True)
    gx = (gxhat - m1 - xhat * m2) * inv_std
    return gx, ggain, goffset
