"""Spatial and spectral diagnostics for feature-map operators.

The routing diagnostics ask where an output pixel's gradient mass lives:

- influence_map: G(h, w) = sum over output channels c* and input channels
  c of |d y[0, c*, h*, w*] / d x[0, c, h, w]|, one backward per c*.
- far: fraction of G's mass strictly beyond Euclidean radius r0 of the
  anchor. A k x k conv has FAR = 0 for any r0 >= the kernel radius.
- routing_centroid: intensity-weighted centroid of G restricted to its
  top (1 - q) quantile mass.
- inhibition_map: response drop D = max(0, r - r') caused by adding a
  small bump at the anchor, where r is the channel-summed absolute
  response. Positive D marks suppression, which plain convolution cannot
  produce.

The statistics are computed directly from the definitions above; their
parameters (radius, quantile, bump size) are this library's documented
defaults rather than any external standard, and the analyze report echoes
the values it used.

Spectral diagnostics summarize an activation tensor itself:

- csc: E|x - blur(x)| / E|x|, the share of signal energy away from a
  Gaussian-smoothed copy (sigma default 1.0, radius ceil(3 sigma),
  replicate padding).
- cer: effective channel rank, exp(entropy of normalized covariance
  eigenvalues) / C, in (0, 1]; 1 means isotropic channels, 1/C means one
  direction carries everything.

Eigenvalues come from a cyclic Jacobi sweep so the whole stack stays
dependency-light and deterministic.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import (ArgumentError, DegenerateMapError, DimensionError,
                     NumericError, UndefinedMetricError)
from .tensor import as_tensor4

EIG_CLAMP = 1e-12


# ======================================================================
# routing diagnostics
# ======================================================================

def _check_anchor(anchor, h: int, w: int) -> tuple:
    ah, aw = int(anchor[0]), int(anchor[1])
    if not (0 <= ah < h and 0 <= aw < w):
        raise ArgumentError(f"anchor {anchor} outside spatial extent {(h, w)}")
    return ah, aw


def influence_map(op, x, anchor) -> np.ndarray:
    """Absolute input-gradient mass of the output pixel at ``anchor``.

    Uses batch element 0 and sums |J| over output and input channels, so
    an operator with C identity channels scores C at the anchor.
    """
    x = as_tensor4(x)
    _, _, h_, w_ = x.shape
    ah, aw = _check_anchor(anchor, h_, w_)
    y, cache = op.forward_cached(x)
    g = np.zeros((h_, w_), dtype=np.float64)
    for co in range(y.shape[1]):
        gy = np.zeros_like(y)
        gy[0, co, ah, aw] = 1.0
        gx = op.input_backward(gy, cache)
        g += np.abs(gx[0]).sum(axis=0)
    return g


def far(g: np.ndarray, r0: float, anchor) -> float:
    """Fraction of map mass strictly farther than ``r0`` from ``anchor``."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise DimensionError(f"map must be 2-D, got shape {g.shape}")
    if np.any(g < 0):
        raise ArgumentError("map must be nonnegative")
    if r0 < 0:
        raise ArgumentError(f"radius must be >= 0, got {r0}")
    h_, w_ = g.shape
    ah, aw = _check_anchor(anchor, h_, w_)
    total = g.sum()
    if total <= 0.0:
        raise DegenerateMapError("map has zero total mass")
    hh, ww = np.meshgrid(np.arange(h_), np.arange(w_), indexing="ij")
    dist = np.sqrt((hh - ah) ** 2.0 + (ww - aw) ** 2.0)
    return float(g[dist > r0].sum() / total)


def routing_centroid(g: np.ndarray, quantile: float = 0.9) -> tuple:
    """(h, w) centroid of the above-quantile portion of the map."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise DimensionError(f"map must be 2-D, got shape {g.shape}")
    if not (0.0 <= quantile < 1.0):
        raise ArgumentError(f"quantile must lie in [0, 1), got {quantile}")
    if g.sum() <= 0.0:
        raise DegenerateMapError("map has zero total mass")
    thresh = np.quantile(g, quantile)
    mask = g >= thresh
    sel = np.where(mask, g, 0.0)
    mass = sel.sum()
    if mass <= 0.0:
        raise DegenerateMapError("no mass at or above the quantile threshold")
    hh, ww = np.meshgrid(np.arange(g.shape[0]), np.arange(g.shape[1]), indexing="ij")
    return (float((hh * sel).sum() / mass), float((ww * sel).sum() / mass))


def inhibition_map(op, x, anchor, eps: float | None = None) -> np.ndarray:
    """Response drop at every pixel after bumping the anchor by ``eps``.

    eps defaults to 0.01 * RMS(x). The anchor pixel itself is zeroed
    since its own response is expected to move.
    """
    x = as_tensor4(x)
    _, _, h_, w_ = x.shape
    ah, aw = _check_anchor(anchor, h_, w_)
    if eps is None:
        rms = float(np.sqrt(np.mean(x.astype(np.float64) ** 2)))
        if rms == 0.0:
            raise UndefinedMetricError("cannot scale the probe: input is all zeros")
        eps = 0.01 * rms
    if eps <= 0:
        raise ArgumentError(f"probe amplitude must be positive, got {eps}")
    base = op.forward(x)
    bumped = x.copy()
    bumped[0, :, ah, aw] += eps
    resp = op.forward(bumped)
    r0 = np.abs(base[0]).sum(axis=0)
    r1 = np.abs(resp[0]).sum(axis=0)
    d = np.maximum(0.0, r0 - r1)
    d[ah, aw] = 0.0
    return d


# ======================================================================
# spectral diagnostics
# ======================================================================

def gaussian_blur(x, sigma: float = 1.0) -> np.ndarray:
    """Per-channel Gaussian blur, radius ceil(3 sigma), replicate padding.

    Separable passes; identical to the dense 2-D kernel because replicate
    padding clamps each axis independently.
    """
    x = as_tensor4(x)
    if sigma <= 0:
        raise ArgumentError(f"sigma must be positive, got {sigma}")
    r = math.ceil(3.0 * sigma)
    t = np.arange(-r, r + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (t / sigma) ** 2)
    kern /= kern.sum()
    h_, w_ = x.shape[2], x.shape[3]
    idx_h = np.clip(np.arange(h_)[:, None] + t[None, :].astype(np.int64), 0, h_ - 1)
    idx_w = np.clip(np.arange(w_)[:, None] + t[None, :].astype(np.int64), 0, w_ - 1)
    xd = x.astype(np.float64)
    # rows pass: out[h] = sum_j kern[j] * x[clamp(h + j - r)]
    rows = np.einsum("j,bchjw->bchw", kern, xd[:, :, idx_h, :])
    cols = np.einsum("j,bchwj->bchw", kern, rows[:, :, :, idx_w])
    return cols.astype(x.dtype, copy=False)


def csc(x, sigma: float = 1.0) -> float:
    """Share of signal energy not captured by a Gaussian-smoothed copy."""
    x = as_tensor4(x)
    denom = float(np.abs(x.astype(np.float64)).mean())
    if denom == 0.0:
        raise UndefinedMetricError("metric undefined for an all-zero input")
    smooth = gaussian_blur(x, sigma)
    num = float(np.abs(x.astype(np.float64) - smooth.astype(np.float64)).mean())
    return num / denom


def sym_eigenvalues(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.

    Sweeps rotate away each off-diagonal element in turn until the largest
    off-diagonal magnitude falls below tol * ||A||_F. Returns eigenvalues
    sorted descending.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix must be square, got shape {a.shape}")
    n = a.shape[0]
    scale = float(np.linalg.norm(a))
    if not np.allclose(a, a.T, atol=1e-12 * max(1.0, scale), rtol=0.0):
        raise ArgumentError("matrix must be symmetric")
    if tol <= 0:
        raise ArgumentError(f"tolerance must be positive, got {tol}")
    m = a.copy()
    if n == 1:
        return m.diagonal().copy()
    thresh = tol * max(scale, np.finfo(np.float64).tiny)
    for _ in range(max_sweeps):
        off = np.abs(m - np.diag(np.diagonal(m))).max()
        if off < thresh:
            diag = np.sort(np.diagonal(m).copy())[::-1]
            return np.ascontiguousarray(diag)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if abs(apq) < thresh / n:
                    continue
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * m[p, :] - s * m[q, :]
                rot_q = s * m[p, :] + c * m[q, :]
                m[p, :], m[q, :] = rot_p, rot_q
                rot_p = c * m[:, p] - s * m[:, q]
                rot_q = s * m[:, p] + c * m[:, q]
                m[:, p], m[:, q] = rot_p, rot_q
    off = np.abs(m - np.diag(np.diagonal(m))).max()
    if off >= thresh:
        raise NumericError(f"Jacobi sweep did not converge in {max_sweeps} sweeps "
                           f"(off-diagonal {off:.3e}, threshold {thresh:.3e})")
    return np.ascontiguousarray(np.sort(np.diagonal(m).copy())[::-1])


def cer(x) -> float:
    """Effective channel rank: exp(spectral entropy) / C in (0, 1]."""
    x = as_tensor4(x)
    b_, c_, h_, w_ = x.shape
    n = b_ * h_ * w_
    if n < 2:
        raise UndefinedMetricError("need at least two samples for a covariance")
    samples = x.astype(np.float64).transpose(0, 2, 3, 1).reshape(n, c_)
    centered = samples - samples.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (n - 1)
    if not np.any(cov):
        raise UndefinedMetricError("covariance is identically zero")
    lams = sym_eigenvalues(cov)
    lam_max = lams[0]
    if lam_max <= 0.0:
        raise UndefinedMetricError("covariance has no positive spectrum")
    lams = np.where(lams < EIG_CLAMP * lam_max, 0.0, lams)
    total = lams.sum()
    probs = lams / total
    nz = probs[probs > 0.0]
    entropy = float(-(nz * np.log(nz)).sum())
    return float(np.exp(entropy) / c_)


# ======================================================================
# combined report
# ======================================================================

def analyze_operator(op, x, anchor=None, r0: float = 4.0, sigma: float = 1.0,
                     quantile: float = 0.9, eps: float | None = None) -> dict:
    """Run the full diagnostic battery for one operator on one input.

    csc and cer are computed on the operator's output. Returns a plain
    dict ready for JSON serialization; the maps themselves are returned
    under "maps" for callers that want to dump them.
    """
    x = as_tensor4(x)
    _, _, h_, w_ = x.shape
    if anchor is None:
        anchor = (h_ // 2, w_ // 2)
    ah, aw = _check_anchor(anchor, h_, w_)
    g = influence_map(op, x, (ah, aw))
    d = inhibition_map(op, x, (ah, aw), eps)
    y = op.forward(x)
    centroid = routing_centroid(g, quantile)
    report = {
        "anchor": [ah, aw],
        "far": far(g, r0, (ah, aw)),
        "routing_centroid": [centroid[0], centroid[1]],
        "inhibition_total": float(d.sum()),
        "csc": csc(y, sigma),
        "cer": cer(y),
        "metadata": {
            "r0": float(r0),
            "quantile": float(quantile),
            "sigma": float(sigma),
            "probe_eps": None if eps is None else float(eps),
            "note": ("diagnostic parameters (radius, quantile, probe size) are "
                     "library defaults; csc/cer are computed on the operator output"),
        },
        "maps": {"influence": g, "inhibition": d},
    }
    return report
