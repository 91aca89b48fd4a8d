"""Finite-difference validation of hand-derived backward passes.

Analytic gradients are compared against central differences of the scalar
probe L(y) = sum(y * s) for a fixed random seed tensor s, whose exact
gradient seed is s itself. The comparison statistic is

    rel_err = max|g_analytic - g_fd| / max(1, max|g_fd|)

which behaves like an absolute error near zero and a relative error for
large gradients. Checks run in float64 with step h = 1e-3; a pass is
rel_err < 1e-4.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError

DEFAULT_STEP = 1e-3
DEFAULT_TOL = 1e-4


def finite_difference_grad(f, x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    Perturbs every element of ``x`` by +/- h in turn, so cost is
    2 * x.size forward evaluations. Use small probes.
    """
    if h <= 0:
        raise ArgumentError(f"step must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(x))
        flat[i] = orig - h
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def relative_error(g_analytic: np.ndarray, g_fd: np.ndarray) -> float:
    g_analytic = np.asarray(g_analytic, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    num = np.abs(g_analytic - g_fd).max() if g_analytic.size else 0.0
    den = max(1.0, np.abs(g_fd).max() if g_fd.size else 0.0)
    return float(num / den)


def check_vjp(forward, inputs: dict, vjp, seed_rng=None, h: float = DEFAULT_STEP) -> dict:
    """Compare a vector-Jacobian product against finite differences.

    forward: callable(**inputs) -> y
    vjp:     callable(gy, **inputs) -> dict of gradients, keys a subset of
             ``inputs``; entries of value None are skipped.

    Returns {input_name: rel_err} plus "max" with the worst case.
    """
    inputs = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    y0 = np.asarray(forward(**inputs))
    rng = seed_rng if seed_rng is not None else np.random.default_rng(0)
    s = rng.standard_normal(y0.shape)

    grads = vjp(s, **inputs)
    report = {}
    for name, g in grads.items():
        if g is None:
            continue

        def loss(v, _name=name):
            probe = dict(inputs)
            probe[_name] = v
            return float((np.asarray(forward(**probe)) * s).sum())

        g_fd = finite_difference_grad(loss, inputs[name], h)
        report[name] = relative_error(g, g_fd)
    report["max"] = max(report.values()) if report else 0.0
    return report
