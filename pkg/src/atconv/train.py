"""Minibatch training for the micro classifier.

Deterministic end to end for a fixed seed: parameter init, per-epoch
shuffling, and data synthesis all draw from the seeded generator, and the
numerics are plain single-threaded array code. Metrics stream out as one
JSON object per epoch; the final (or, on divergence, last finite)
parameters land in an ATCK checkpoint.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import atck
from .errors import ArgumentError, TrainingDiverged
from .micro import (AdamHyper, MicroConfig, MicroModel, adam_init, adam_step,
                    cross_entropy)
from .rng import Rng


@dataclass
class TrainSettings:
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)
    dtype: str = "f32"
    target_test_acc: float | None = None  # stop early once reached

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ArgumentError("epochs and batch_size must be positive")
        if self.dtype not in ("f32", "f64"):
            raise ArgumentError(f"dtype must be f32 or f64, got {self.dtype!r}")


def evaluate(model: MicroModel, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    """Top-1 accuracy over a dataset."""
    hits = 0
    for lo in range(0, images.shape[0], batch_size):
        logits = model.forward(images[lo:lo + batch_size])
        hits += int((logits.argmax(axis=1) == labels[lo:lo + batch_size]).sum())
    return hits / images.shape[0]


def train(model_config: MicroConfig, train_set, test_set,
          settings: TrainSettings, metrics_path=None, checkpoint_path=None,
          op_config=None):
    """Train a fresh model; returns (model, per-epoch metric records).

    op_config tweaks only the mixer's internals (kernel modulation and
    the ablation switches); the loop itself never looks at it.

    A non-finite loss aborts the run: the last finite parameters are
    checkpointed (when a path is given) and TrainingDiverged is raised.
    """
    settings.validate()
    dtype = np.float32 if settings.dtype == "f32" else np.float64
    rng = Rng(settings.seed)
    model = MicroModel.init(rng, model_config, op_config=op_config, dtype=dtype)
    params = model.named_parameters()
    state = adam_init(params)

    x_train = train_set.images.astype(dtype)
    y_train = train_set.labels
    x_test = test_set.images.astype(dtype)
    y_test = test_set.labels

    records = []
    metrics_file = open(metrics_path, "w") if metrics_path is not None else None
    last_good = {k: v.copy() for k, v in params.items()}
    try:
        for epoch in range(settings.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(y_train))
            loss_sum = 0.0
            hit_sum = 0
            seen = 0
            for lo in range(0, len(y_train), settings.batch_size):
                idx = order[lo:lo + settings.batch_size]
                xb, yb = x_train[idx], y_train[idx]
                logits, cache = model.forward_cached(xb)
                loss, dlogits = cross_entropy(logits, yb)
                if not math.isfinite(loss):
                    if checkpoint_path is not None:
                        atck.save_atck(checkpoint_path, last_good)
                    raise TrainingDiverged(
                        f"loss became non-finite at epoch {epoch}, sample {lo}")
                _, grads = model.backward(dlogits, cache)
                params = adam_step(params, grads, state, settings.hyper)
                for name, value in params.items():
                    model.set_parameter(name, value)
                loss_sum += loss * len(yb)
                hit_sum += int((logits.argmax(axis=1) == yb).sum())
                seen += len(yb)
            last_good = {k: v.copy() for k, v in params.items()}
            test_acc = evaluate(model, x_test, y_test)
            record = {
                "epoch": epoch,
                "train_loss": loss_sum / seen,
                "train_acc": hit_sum / seen,
                "test_acc": test_acc,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
            records.append(record)
            if metrics_file is not None:
                metrics_file.write(json.dumps(record) + "\n")
                metrics_file.flush()
            if (settings.target_test_acc is not None
                    and test_acc >= settings.target_test_acc):
                break
    finally:
        if metrics_file is not None:
            metrics_file.close()
    if checkpoint_path is not None:
        atck.save_atck(checkpoint_path, params)
    return model, records


def overfit_single_sample(model_config: MicroConfig, image: np.ndarray,
                          label: int, steps: int = 200, lr: float = 1e-2,
                          seed: int = 0, loss_target: float = 0.01):
    """Drive the loss on one sample toward zero; returns (losses, hit_step).

    hit_step is the first step index whose loss drops below ``loss_target``,
    or None if that never happens within ``steps``.
    """
    rng = Rng(seed)
    model = MicroModel.init(rng, model_config, dtype=np.float64)
    params = model.named_parameters()
    state = adam_init(params)
    hyper = AdamHyper(lr=lr, weight_decay=0.0)
    xb = np.asarray(image, dtype=np.float64)
    if xb.ndim == 3:
        xb = xb[None]
    yb = np.array([label], dtype=np.int64)
    losses = []
    hit = None
    for step in range(steps):
        logits, cache = model.forward_cached(xb)
        loss, dlogits = cross_entropy(logits, yb)
        losses.append(loss)
        if hit is None and loss < loss_target:
            hit = step
            break
        _, grads = model.backward(dlogits, cache)
        params = adam_step(params, grads, state, hyper)
        for name, value in params.items():
            model.set_parameter(name, value)
    return losses, hit
