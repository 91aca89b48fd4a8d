"""A small residual classifier built around the adaptive operator.

Single stage: patch embedding, ``blocks`` pre-norm residual blocks, global
average pooling, linear head. Each block is

    x1  = x  + op(norm1(x))
    out = x1 + glu(norm2(x1))

where op is the adaptive depthwise operator and glu is the gated channel
MLP y = W_c ((W_a x) * gelu(W_b x)) with expansion E = expansion * C.

Parameters live in plain dataclasses; ``named_parameters`` flattens them
into an ordered {name: array} dict that the optimizer, the checkpoint
container, and the gradient dicts all share.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ArgumentError, DimensionError
from .op import ATConvCache, ATConvConfig, ATConvParams, atconv_backward, atconv_forward_cached
from .primitives import (
    conv1x1_backward, conv1x1_forward,
    gelu_backward, gelu_forward,
    layer_norm_backward, layer_norm_forward,
    linear_backward, linear_forward,
)
from .rng import Rng
from .tensor import as_tensor4


# ======================================================================
# gated channel MLP
# ======================================================================

@dataclass
class GluParams:
    w_a: np.ndarray
    b_a: np.ndarray
    w_b: np.ndarray
    b_b: np.ndarray
    w_c: np.ndarray
    b_c: np.ndarray

    @classmethod
    def init(cls, rng: Rng, channels: int, expansion: int = 4, dtype=np.float64):
        e = expansion * channels
        if e < channels:
            raise ArgumentError(
                f"expansion width {e} must be at least the channel count {channels}")
        bi = math.sqrt(1.0 / channels)
        bo = math.sqrt(1.0 / e)
        return cls(
            w_a=rng.uniform(-bi, bi, (e, channels), dtype),
            b_a=np.zeros(e, dtype=dtype),
            w_b=rng.uniform(-bi, bi, (e, channels), dtype),
            b_b=np.zeros(e, dtype=dtype),
            w_c=rng.uniform(-bo, bo, (channels, e), dtype),
            b_c=np.zeros(channels, dtype=dtype),
        )

    def validate(self) -> None:
        e, c = self.w_a.shape
        if e < c:
            raise DimensionError(f"hidden width {e} smaller than channels {c}")
        if self.w_b.shape != (e, c) or self.w_c.shape != (c, e):
            raise DimensionError("glu weight shapes disagree")


def glu_forward(x, p: GluParams):
    """y = W_c ((W_a x) * gelu(W_b x)); all maps pointwise over pixels."""
    p.validate()
    a, ca = conv1x1_forward(x, p.w_a, p.b_a)
    braw, cb = conv1x1_forward(x, p.w_b, p.b_b)
    gate, cg = gelu_forward(braw)
    h = a * gate
    y, cc = conv1x1_forward(h, p.w_c, p.b_c)
    return y, (ca, cb, cg, cc, a, gate)


def glu_backward(gy, cache):
    ca, cb, cg, cc, a, gate = cache
    gh, gw_c, gb_c = conv1x1_backward(gy, cc)
    ga = gh * gate
    ggate = gh * a
    gbraw = gelu_backward(ggate, cg)
    gx_a, gw_a, gb_a = conv1x1_backward(ga, ca)
    gx_b, gw_b, gb_b = conv1x1_backward(gbraw, cb)
    grads = {"w_a": gw_a, "b_a": gb_a, "w_b": gw_b, "b_b": gb_b,
             "w_c": gw_c, "b_c": gb_c}
    return gx_a + gx_b, grads


# ======================================================================
# residual block
# ======================================================================

@dataclass
class BlockParams:
    norm1_gain: np.ndarray
    norm1_offset: np.ndarray
    mixer: ATConvParams
    norm2_gain: np.ndarray
    norm2_offset: np.ndarray
    glu: GluParams

    @classmethod
    def init(cls, rng: Rng, channels: int, kernel: int = 3, expansion: int = 4,
             dtype=np.float64):
        return cls(
            norm1_gain=np.ones(channels, dtype=dtype),
            norm1_offset=np.zeros(channels, dtype=dtype),
            mixer=ATConvParams.init(rng, channels, kernel, dtype),
            norm2_gain=np.ones(channels, dtype=dtype),
            norm2_offset=np.zeros(channels, dtype=dtype),
            glu=GluParams.init(rng, channels, expansion, dtype),
        )


def block_forward(x, p: BlockParams, config: Optional[ATConvConfig] = None):
    config = config if config is not None else ATConvConfig()
    n1, c_n1 = layer_norm_forward(x, p.norm1_gain, p.norm1_offset)
    mix, c_mix = atconv_forward_cached(n1, p.mixer, config)
    x1 = x + mix
    n2, c_n2 = layer_norm_forward(x1, p.norm2_gain, p.norm2_offset)
    g, c_glu = glu_forward(n2, p.glu)
    return x1 + g, (c_n1, c_mix, c_n2, c_glu)


def block_backward(gy, cache):
    c_n1, c_mix, c_n2, c_glu = cache
    gn2, glu_grads = glu_backward(gy, c_glu)
    gx1_from_norm, g2_gain, g2_offset = layer_norm_backward(gn2, c_n2)
    gx1 = gy + gx1_from_norm
    gn1, mix_grads = atconv_backward(gx1, c_mix)
    gx_from_norm, g1_gain, g1_offset = layer_norm_backward(gn1, c_n1)
    gx = gx1 + gx_from_norm
    grads = {"norm1_gain": g1_gain, "norm1_offset": g1_offset,
             "norm2_gain": g2_gain, "norm2_offset": g2_offset}
    grads.update({f"mixer.{k}": v for k, v in mix_grads.items()})
    grads.update({f"glu.{k}": v for k, v in glu_grads.items()})
    return gx, grads


# ======================================================================
# patch embedding
# ======================================================================

def _patchify(x, patch: int):
    b_, c_, h_, w_ = x.shape
    hp, wp = h_ // patch, w_ // patch
    # (B, C, Hp, P, Wp, P) -> (B, C, P, P, Hp, Wp) -> (B, C*P*P, Hp, Wp)
    t = x.reshape(b_, c_, hp, patch, wp, patch).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(t.reshape(b_, c_ * patch * patch, hp, wp))


def _unpatchify(g, in_shape, patch: int):
    b_, c_, h_, w_ = in_shape
    hp, wp = h_ // patch, w_ // patch
    t = g.reshape(b_, c_, patch, patch, hp, wp).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(t.reshape(b_, c_, h_, w_))


def patch_embed_forward(x, w, bias, patch: int):
    """Non-overlapping patch projection: fold each patch into channels,
    then mix pointwise."""
    x = as_tensor4(x)
    if x.shape[2] % patch or x.shape[3] % patch:
        raise DimensionError(
            f"spatial size {x.shape[2:]} not divisible by patch {patch}")
    cols = _patchify(x, patch)
    y, sub = conv1x1_forward(cols, w, bias)
    return y, (sub, x.shape, patch)


def patch_embed_backward(gy, cache):
    sub, in_shape, patch = cache
    gcols, gw, gb = conv1x1_backward(gy, sub)
    return _unpatchify(gcols, in_shape, patch), gw, gb


# ======================================================================
# the classifier
# ======================================================================

@dataclass
class MicroConfig:
    in_channels: int = 1
    channels: int = 32
    blocks: int = 2
    patch: int = 4
    kernel: int = 3
    expansion: int = 4
    num_classes: int = 10

    def validate(self) -> None:
        for name in ("in_channels", "channels", "blocks", "patch", "num_classes"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ArgumentError(f"{name} must be a positive int, got {v!r}")
        if self.expansion < 1:
            raise ArgumentError(f"expansion must be >= 1, got {self.expansion}")


@dataclass
class MicroModel:
    config: MicroConfig
    embed_w: np.ndarray
    embed_b: np.ndarray
    blocks: list
    head_w: np.ndarray
    head_b: np.ndarray
    op_config: ATConvConfig = field(default_factory=ATConvConfig)

    @classmethod
    def init(cls, rng: Rng, config: MicroConfig,
             op_config: Optional[ATConvConfig] = None, dtype=np.float64):
        """Head starts at zero so the initial loss is exactly the uniform
        cross-entropy ln(num_classes)."""
        config.validate()
        fan_in = config.in_channels * config.patch * config.patch
        bound = math.sqrt(1.0 / fan_in)
        return cls(
            config=config,
            embed_w=rng.uniform(-bound, bound, (config.channels, fan_in), dtype),
            embed_b=np.zeros(config.channels, dtype=dtype),
            blocks=[BlockParams.init(rng, config.channels, config.kernel,
                                     config.expansion, dtype)
                    for _ in range(config.blocks)],
            head_w=np.zeros((config.num_classes, config.channels), dtype=dtype),
            head_b=np.zeros(config.num_classes, dtype=dtype),
            op_config=op_config if op_config is not None else ATConvConfig(),
        )

    def forward(self, x):
        return self.forward_cached(x)[0]

    def forward_cached(self, x):
        x = as_tensor4(x)
        h, c_embed = patch_embed_forward(x, self.embed_w, self.embed_b, self.config.patch)
        block_caches = []
        for bp in self.blocks:
            h, bc = block_forward(h, bp, self.op_config)
            block_caches.append(bc)
        feats = h.mean(axis=(2, 3))
        logits, c_head = linear_forward(feats, self.head_w, self.head_b)
        return logits, (c_embed, block_caches, h.shape, c_head)

    def backward(self, dlogits, cache):
        c_embed, block_caches, h_shape, c_head = cache
        gfeats, gw_head, gb_head = linear_backward(dlogits, c_head)
        area = h_shape[2] * h_shape[3]
        gh = np.broadcast_to(
            (gfeats / area)[:, :, None, None], h_shape).astype(gfeats.dtype)
        grads = {"head_w": gw_head, "head_b": gb_head}
        for i in reversed(range(len(self.blocks))):
            gh, bgrads = block_backward(gh, block_caches[i])
            grads.update({f"blocks.{i}.{k}": v for k, v in bgrads.items()})
        gx, gw_embed, gb_embed = patch_embed_backward(gh, c_embed)
        grads["embed_w"] = gw_embed
        grads["embed_b"] = gb_embed
        return gx, grads

    def named_parameters(self) -> dict:
        out = {"embed_w": self.embed_w, "embed_b": self.embed_b}
        for i, bp in enumerate(self.blocks):
            pre = f"blocks.{i}."
            out[pre + "norm1_gain"] = bp.norm1_gain
            out[pre + "norm1_offset"] = bp.norm1_offset
            for k, v in bp.mixer.named().items():
                out[pre + "mixer." + k] = v
            out[pre + "norm2_gain"] = bp.norm2_gain
            out[pre + "norm2_offset"] = bp.norm2_offset
            for k in ("w_a", "b_a", "w_b", "b_b", "w_c", "b_c"):
                out[pre + "glu." + k] = getattr(bp.glu, k)
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        parts = name.split(".")
        if parts[0] == "blocks":
            bp = self.blocks[int(parts[1])]
            if parts[2] == "mixer":
                setattr(bp.mixer, parts[3], value)
            elif parts[2] == "glu":
                setattr(bp.glu, parts[3], value)
            else:
                setattr(bp, parts[2], value)
        else:
            setattr(self, parts[0], value)

    def param_count(self) -> int:
        return sum(int(v.size) for v in self.named_parameters().values())


# ======================================================================
# loss and optimizer
# ======================================================================

def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    Stabilized with log-sum-exp; gradient is (softmax - onehot) / B.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be (B, classes), got {logits.shape}")
    b_, nc = logits.shape
    if labels.shape != (b_,):
        raise DimensionError(f"labels must be ({b_},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= nc:
        raise ArgumentError("labels out of range for the class count")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(b_), labels]
    loss = float((lse - picked).mean())
    soft = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    soft[np.arange(b_), labels] -= 1.0
    return loss, soft / b_


@dataclass
class AdamHyper:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adam_init(params: dict) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, hyper: AdamHyper) -> dict:
    """One decoupled-weight-decay Adam update; returns updated params.

    Weight decay is applied directly to the parameter, outside the moment
    estimates. Parameters without a gradient entry are left untouched.
    """
    state["t"] += 1
    t = state["t"]
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        m = state["m"][name] = b1 * state["m"][name] + (1.0 - b1) * g
        v = state["v"][name] = b2 * state["v"][name] + (1.0 - b2) * (g * g)
        mh = m / bc1
        vh = v / bc2
        step = mh / (np.sqrt(vh) + hyper.eps)
        if hyper.weight_decay:
            step = step + hyper.weight_decay * p
        out[name] = p - hyper.lr * step
    return out
