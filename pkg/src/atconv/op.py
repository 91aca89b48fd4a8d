"""The attentive convolution operator.

The operator replaces a static depthwise kernel with one generated from the
input itself, in four stages:

1. context-to-kernel: a pointwise conv mixes channels, adaptive average
   pooling condenses the map to the kernel grid, a GELU gates it, and a
   shared (k*k x k*k) matrix mixes the pooled taps into one raw k x k
   kernel per (batch, channel);
2. kernel modulation: the raw kernel is reshaped toward a difference
   operator. The default subtracts a learned, sigmoid-bounded fraction of
   the kernel mean from every tap ("differential" modulation), which keeps
   per-tap sensitivity local while pushing the kernel toward zero mean;
3. aggregation: a pointwise value projection, then the generated kernel is
   applied as a depthwise cross-correlation with zero padding floor(k/2)
   and stride 1, so spatial size is preserved;
4. a pointwise output projection.

Everything differentiable has a hand-derived backward; caches are explicit
and produced only by the ``*_cached`` forward variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import atck
from .errors import ArgumentError, DimensionError, UnsupportedConfigError
from .primitives import (
    Conv1x1Cache, GeluCache, LinearCache, PoolCache, SoftmaxCache,
    adaptive_avg_pool_backward, adaptive_avg_pool_forward,
    conv1x1_backward, conv1x1_forward,
    gelu_backward, gelu_forward,
    linear_backward, linear_forward,
    sigmoid, softmax_backward, softmax_forward,
)
from .rng import Rng
from .tensor import as_matrix, as_tensor4, as_vector, ensure_finite, flop_counter

KERNEL_MODS = ("none", "softmax", "central_diff", "dkm")

# Canonical checkpoint entry names, in serialization order.
PARAM_NAMES = ("w_f", "w_f_bias", "w_gen", "gamma",
               "w_value", "w_value_bias", "w_out", "w_out_bias")


# ======================================================================
# parameters and configuration
# ======================================================================

@dataclass
class ATConvParams:
    """Learnable state for one operator instance at width ``channels``."""

    w_f: np.ndarray
    w_f_bias: np.ndarray
    w_gen: np.ndarray
    gamma: np.ndarray
    w_value: np.ndarray
    w_value_bias: np.ndarray
    w_out: np.ndarray
    w_out_bias: np.ndarray
    kernel_size: int

    @property
    def channels(self) -> int:
        return self.w_f.shape[0]

    def validate(self) -> None:
        k = self.kernel_size
        if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
            raise ArgumentError(f"kernel_size must be a positive odd int, got {k!r}")
        c = self.w_f.shape[0] if np.ndim(self.w_f) == 2 else -1
        self.w_f = as_matrix(self.w_f, "w_f")
        if self.w_f.shape != (c, c):
            raise DimensionError(f"w_f must be square, got {self.w_f.shape}")
        self.w_gen = as_matrix(self.w_gen, "w_gen")
        if self.w_gen.shape != (k * k, k * k):
            raise DimensionError(
                f"w_gen must be ({k * k}, {k * k}) for kernel_size {k}, got {self.w_gen.shape}")
        self.gamma = as_vector(self.gamma, c, "gamma")
        for name in ("w_value", "w_out"):
            m = as_matrix(getattr(self, name), name)
            if m.shape != (c, c):
                raise DimensionError(f"{name} must be ({c}, {c}), got {m.shape}")
            setattr(self, name, m)
        self.w_f_bias = as_vector(self.w_f_bias, c, "w_f_bias")
        self.w_value_bias = as_vector(self.w_value_bias, c, "w_value_bias")
        self.w_out_bias = as_vector(self.w_out_bias, c, "w_out_bias")

    @classmethod
    def init(cls, rng: Rng, channels: int, kernel_size: int = 3,
             dtype=np.float64) -> "ATConvParams":
        """Fresh parameters.

        Channel-mixing matrices draw uniform +/- sqrt(1/channels); the
        kernel-mixing matrix starts at identity plus uniform +/- 0.01 so
        the generator begins near a pass-through; gamma starts at 0, i.e.
        a modulation strength of one half.
        """
        if channels < 1:
            raise ArgumentError(f"channels must be positive, got {channels}")
        bound = math.sqrt(1.0 / channels)
        kk = kernel_size * kernel_size
        p = cls(
            w_f=rng.uniform(-bound, bound, (channels, channels), dtype),
            w_f_bias=np.zeros(channels, dtype=dtype),
            w_gen=(np.eye(kk, dtype=dtype)
                   + rng.uniform(-0.01, 0.01, (kk, kk), dtype)),
            gamma=np.zeros(channels, dtype=dtype),
            w_value=rng.uniform(-bound, bound, (channels, channels), dtype),
            w_value_bias=np.zeros(channels, dtype=dtype),
            w_out=rng.uniform(-bound, bound, (channels, channels), dtype),
            w_out_bias=np.zeros(channels, dtype=dtype),
            kernel_size=int(kernel_size),
        )
        p.validate()
        return p

    def named(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def save(self, path) -> None:
        atck.save_atck(path, self.named())

    @classmethod
    def from_named(cls, arrays: dict) -> "ATConvParams":
        missing = [n for n in PARAM_NAMES if n not in arrays]
        if missing:
            raise DimensionError(f"checkpoint is missing entries: {missing}")
        kk = arrays["w_gen"].shape[0]
        k = math.isqrt(kk)
        if k * k != kk:
            raise DimensionError(f"w_gen side {kk} is not a square number")
        p = cls(**{n: arrays[n] for n in PARAM_NAMES}, kernel_size=k)
        p.validate()
        return p

    @classmethod
    def load(cls, path) -> "ATConvParams":
        return cls.from_named(atck.load_atck(path))


@dataclass
class ATConvConfig:
    """Structural switches.

    Each stage of the operator can be turned off to fall back to plainer
    behavior, which is how the ablation grid walks from a static depthwise
    conv up to the full operator. ``lambda_override`` pins the modulation
    strength directly (bypassing sigmoid(gamma)); it exists for tests and
    diagnostics, not training.
    """

    use_kernel_generator: bool = True
    use_value_proj: bool = True
    use_out_proj: bool = True
    kernel_mod: str = "dkm"
    static_kernel: Optional[np.ndarray] = None
    lambda_override: Optional[float] = None

    def validate(self, channels: int, kernel_size: int) -> None:
        if self.kernel_mod not in KERNEL_MODS:
            raise ArgumentError(
                f"kernel_mod must be one of {KERNEL_MODS}, got {self.kernel_mod!r}")
        if self.kernel_mod == "central_diff" and kernel_size == 1:
            raise UnsupportedConfigError(
                "central_diff needs off-center taps; a 1x1 kernel has none")
        if self.use_kernel_generator:
            if self.static_kernel is not None:
                raise ArgumentError(
                    "static_kernel is only used when the kernel generator is off")
        else:
            if self.static_kernel is None:
                raise ArgumentError(
                    "a static_kernel (channels x k*k) is required when the "
                    "kernel generator is off")
            sk = as_matrix(self.static_kernel, "static_kernel")
            if sk.shape != (channels, kernel_size * kernel_size):
                raise DimensionError(
                    f"static_kernel must be ({channels}, {kernel_size * kernel_size}), "
                    f"got {sk.shape}")
            self.static_kernel = sk
        if self.lambda_override is not None:
            if self.kernel_mod != "dkm":
                raise ArgumentError("lambda_override only applies to kernel_mod='dkm'")
            lo = float(self.lambda_override)
            if not (0.0 <= lo <= 1.0):
                raise ArgumentError(f"lambda_override must lie in [0, 1], got {lo}")


# ======================================================================
# dynamic depthwise aggregation
# ======================================================================

class DynDepthwiseCache(NamedTuple):
    v: np.ndarray
    alpha: np.ndarray


def dyn_depthwise(v: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    y, _ = dyn_depthwise_forward(v, alpha)
    return y


def dyn_depthwise_forward(v, alpha):
    """Apply a per-(batch, channel) k x k kernel as depthwise
    cross-correlation, zero padding floor(k/2), stride 1.

    y[b,c,h,w] = sum_{u,v} alpha[b,c,u,v] * vpad[b,c,h+u,w+v]
    """
    v = as_tensor4(v, "v")
    alpha = np.asarray(alpha)
    if alpha.ndim != 4:
        raise DimensionError(f"alpha must be (B, C, k, k), got shape {alpha.shape}")
    b_, c_, h_, w_ = v.shape
    k = alpha.shape[2]
    if alpha.shape != (b_, c_, k, k):
        raise DimensionError(
            f"alpha shape {alpha.shape} incompatible with input {v.shape}")
    if k % 2 == 0:
        raise ArgumentError(f"kernel side must be odd, got {k}")
    p = k // 2
    vp = np.zeros((b_, c_, h_ + 2 * p, w_ + 2 * p), dtype=v.dtype)
    vp[:, :, p:p + h_, p:p + w_] = v
    y = np.zeros_like(v)
    for u in range(k):
        for t in range(k):
            y += alpha[:, :, u, t][:, :, None, None] * vp[:, :, u:u + h_, t:t + w_]
    flop_counter.add(2 * b_ * c_ * k * k * h_ * w_)
    ensure_finite(y, "dyn_depthwise")
    return y, DynDepthwiseCache(v, alpha)


def dyn_depthwise_backward(gy, cache: DynDepthwiseCache):
    if cache is None:
        from .errors import StateError
        raise StateError("dyn_depthwise_backward needs the forward cache")
    v, alpha = cache
    gy = as_tensor4(gy, "gy")
    if gy.shape != v.shape:
        raise DimensionError(f"gy shape {gy.shape} != output shape {v.shape}")
    b_, c_, h_, w_ = v.shape
    k = alpha.shape[2]
    p = k // 2
    vp = np.zeros((b_, c_, h_ + 2 * p, w_ + 2 * p), dtype=v.dtype)
    vp[:, :, p:p + h_, p:p + w_] = v
    gvp = np.zeros_like(vp)
    galpha = np.empty_like(alpha)
    for u in range(k):
        for t in range(k):
            galpha[:, :, u, t] = (gy * vp[:, :, u:u + h_, t:t + w_]).sum(axis=(2, 3))
            gvp[:, :, u:u + h_, t:t + w_] += alpha[:, :, u, t][:, :, None, None] * gy
    gv = gvp[:, :, p:p + h_, p:p + w_]
    return np.ascontiguousarray(gv), galpha


# ======================================================================
# kernel generation (context-to-kernel) and modulation
# ======================================================================

class C2KCache(NamedTuple):
    conv: Conv1x1Cache
    pool: PoolCache
    act: GeluCache
    mix: LinearCache
    k: int


def generate_kernels(x, params: ATConvParams):
    raw, _ = generate_kernels_forward(x, params)
    return raw


def generate_kernels_forward(x, params: ATConvParams):
    """Raw per-(batch, channel) kernels from the input's pooled context."""
    x = as_tensor4(x)
    k = params.kernel_size
    f, c_conv = conv1x1_forward(x, params.w_f, params.w_f_bias)
    z, c_pool = adaptive_avg_pool_forward(f, k)
    a, c_act = gelu_forward(z)
    b_, c_, _, _ = a.shape
    # vec() flattens each k x k context row-major before the tap mixing
    vec, c_mix = linear_forward(a.reshape(b_, c_, k * k), params.w_gen)
    raw = np.ascontiguousarray(vec.reshape(b_, c_, k, k))
    return raw, C2KCache(c_conv, c_pool, c_act, c_mix, k)


def generate_kernels_backward(graw, cache: C2KCache):
    if cache is None:
        from .errors import StateError
        raise StateError("generate_kernels_backward needs the forward cache")
    graw = np.asarray(graw)
    b_, c_, k, _ = graw.shape
    gvec, gw_gen, _ = linear_backward(graw.reshape(b_, c_, k * k), cache.mix)
    gz = gelu_backward(gvec.reshape(b_, c_, k, k), cache.act)
    gf = adaptive_avg_pool_backward(gz, cache.pool)
    gx, gw_f, gb_f = conv1x1_backward(gf, cache.conv)
    return gx, {"w_f": gw_f, "w_f_bias": gb_f, "w_gen": gw_gen}


class DkmCache(NamedTuple):
    mean: np.ndarray  # (B, C, 1, 1)
    lam: np.ndarray   # (C,)
    gamma_active: bool


def dkm(raw, gamma, lambda_override=None):
    alpha, _ = dkm_forward(raw, gamma, lambda_override)
    return alpha


def dkm_forward(raw, gamma, lambda_override=None):
    """alpha[b,c] = raw[b,c] - lam[c] * mean(raw[b,c]), lam = sigmoid(gamma).

    Per-tap sensitivity to the raw kernel is (1 - lam/k^2) on the diagonal
    and a flat -lam/k^2 off it, so each tap inhibits all others a little.
    At lam = 1 the kernel is exactly zero-mean.
    """
    raw = np.asarray(raw)
    if raw.ndim != 4:
        raise DimensionError(f"raw kernels must be (B, C, k, k), got {raw.shape}")
    c_ = raw.shape[1]
    if lambda_override is None:
        gamma = as_vector(gamma, c_, "gamma")
        lam = sigmoid(gamma)
        gamma_active = True
    else:
        lam = np.full(c_, float(lambda_override), dtype=raw.dtype)
        gamma_active = False
    mean = raw.mean(axis=(2, 3), keepdims=True)
    alpha = raw - lam[None, :, None, None] * mean
    flop_counter.add(2 * raw.size)
    ensure_finite(alpha, "dkm")
    return alpha, DkmCache(mean, lam, gamma_active)


def dkm_backward(galpha, cache: DkmCache):
    if cache is None:
        from .errors import StateError
        raise StateError("dkm_backward needs the forward cache")
    galpha = np.asarray(galpha)
    mean, lam, gamma_active = cache
    kk = galpha.shape[2] * galpha.shape[3]
    s = galpha.sum(axis=(2, 3), keepdims=True)
    graw = galpha - (lam[None, :, None, None] / kk) * s
    glam = -(s[:, :, 0, 0] * mean[:, :, 0, 0]).sum(axis=0)
    if gamma_active:
        ggamma = glam * lam * (1.0 - lam)
    else:
        ggamma = np.zeros_like(lam)
    return graw, ggamma


def central_diff_mod(raw):
    """Rewrite the center tap to raw_center - sum(raw), a discrete
    difference stencil: the off-center taps keep their values and the
    whole kernel sums to zero exactly."""
    raw = np.asarray(raw)
    k = raw.shape[2]
    if k == 1:
        raise UnsupportedConfigError(
            "central_diff needs off-center taps; a 1x1 kernel has none")
    kc = k // 2
    alpha = np.array(raw)
    alpha[:, :, kc, kc] = raw[:, :, kc, kc] - raw.sum(axis=(2, 3))
    return alpha


def central_diff_backward(galpha):
    galpha = np.asarray(galpha)
    k = galpha.shape[2]
    kc = k // 2
    gc = galpha[:, :, kc, kc]
    graw = galpha - gc[:, :, None, None]
    graw[:, :, kc, kc] = 0.0
    return graw


# ======================================================================
# the full operator
# ======================================================================

@dataclass
class ATConvCache:
    x_shape: tuple
    gen: Optional[C2KCache]
    mod_kind: str
    mod_cache: object
    value: Optional[Conv1x1Cache]
    dd: DynDepthwiseCache
    out: Optional[Conv1x1Cache]


def atconv_forward(x, params: ATConvParams, config: Optional[ATConvConfig] = None):
    y, _ = atconv_forward_cached(x, params, config)
    return y


def atconv_forward_cached(x, params: ATConvParams, config: Optional[ATConvConfig] = None):
    config = config if config is not None else ATConvConfig()
    x = as_tensor4(x)
    params.validate()
    config.validate(params.channels, params.kernel_size)
    b_, c_, h_, w_ = x.shape
    if c_ != params.channels:
        raise DimensionError(
            f"input has {c_} channels, parameters expect {params.channels}")
    k = params.kernel_size

    if config.use_kernel_generator:
        raw, gen_cache = generate_kernels_forward(x, params)
    else:
        raw = np.broadcast_to(
            config.static_kernel.reshape(c_, k, k), (b_, c_, k, k))
        gen_cache = None

    mod = config.kernel_mod
    if mod == "dkm":
        alpha, mod_cache = dkm_forward(raw, params.gamma, config.lambda_override)
    elif mod == "softmax":
        sm, mod_cache = softmax_forward(raw.reshape(b_, c_, k * k), axis=-1)
        alpha = sm.reshape(b_, c_, k, k)
    elif mod == "central_diff":
        alpha, mod_cache = central_diff_mod(raw), None
    else:
        alpha, mod_cache = raw, None

    if config.use_value_proj:
        v, value_cache = conv1x1_forward(x, params.w_value, params.w_value_bias)
    else:
        v, value_cache = x, None

    y, dd_cache = dyn_depthwise_forward(v, alpha)

    if config.use_out_proj:
        out, out_cache = conv1x1_forward(y, params.w_out, params.w_out_bias)
    else:
        out, out_cache = y, None

    return out, ATConvCache(x.shape, gen_cache, mod, mod_cache,
                            value_cache, dd_cache, out_cache)


def atconv_backward(gy, cache: ATConvCache):
    """Gradients of the full operator.

    Returns (gx, grads) where grads maps canonical parameter names to
    arrays; a "static_kernel" entry appears instead of the generator
    parameters when the generator is off.
    """
    if cache is None:
        from .errors import StateError
        raise StateError("atconv_backward needs the forward cache")
    gy = as_tensor4(gy, "gy")
    grads = {}

    if cache.out is not None:
        g_y, gw_out, gb_out = conv1x1_backward(gy, cache.out)
        grads["w_out"] = gw_out
        grads["w_out_bias"] = gb_out
    else:
        g_y = gy

    g_v, g_alpha = dyn_depthwise_backward(g_y, cache.dd)

    if cache.value is not None:
        gx_value, gw_val, gb_val = conv1x1_backward(g_v, cache.value)
        grads["w_value"] = gw_val
        grads["w_value_bias"] = gb_val
    else:
        gx_value = g_v

    mod = cache.mod_kind
    if mod == "dkm":
        g_raw, ggamma = dkm_backward(g_alpha, cache.mod_cache)
        grads["gamma"] = ggamma
    elif mod == "softmax":
        b_, c_, k, _ = g_alpha.shape
        g_raw = softmax_backward(
            g_alpha.reshape(b_, c_, k * k), cache.mod_cache).reshape(b_, c_, k, k)
    elif mod == "central_diff":
        g_raw = central_diff_backward(g_alpha)
    else:
        g_raw = g_alpha

    if cache.gen is not None:
        gx_kernel, gen_grads = generate_kernels_backward(g_raw, cache.gen)
        grads.update(gen_grads)
        gx = gx_value + gx_kernel
    else:
        b_, c_, k, _ = g_raw.shape
        grads["static_kernel"] = g_raw.sum(axis=0).reshape(c_, k * k)
        gx = gx_value

    return np.ascontiguousarray(gx), grads


class ATConv:
    """Stateful wrapper pairing parameters with a configuration."""

    def __init__(self, params: ATConvParams, config: Optional[ATConvConfig] = None):
        self.params = params
        self.config = config if config is not None else ATConvConfig()
        self.params.validate()
        self.config.validate(params.channels, params.kernel_size)

    def forward(self, x):
        return atconv_forward(x, self.params, self.config)

    def forward_cached(self, x):
        return atconv_forward_cached(x, self.params, self.config)

    def backward(self, gy, cache):
        return atconv_backward(gy, cache)

    def input_backward(self, gy, cache):
        gx, _ = atconv_backward(gy, cache)
        return gx

    def named_parameters(self) -> dict:
        return self.params.named()

    def save(self, path) -> None:
        self.params.save(path)

    @classmethod
    def load(cls, path, config: Optional[ATConvConfig] = None) -> "ATConv":
        return cls(ATConvParams.load(path), config)
