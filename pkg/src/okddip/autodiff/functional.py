"""Softmax with temperature and the probability-space losses built on it."""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

PROB_FLOOR = ops.LOG_FLOOR


def softmax_with_temperature(logits: Tensor, T: float) -> Tensor:
    """Row-wise softmax of ``logits / T``."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    if not np.all(np.isfinite(logits.data)):
        raise ValueError("softmax_with_temperature: non-finite logits")
    return ops.softmax(ops.scale(logits, 1.0 / T), axis=-1)


def cross_entropy(q: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class (probabilities clamped at 1e-12)."""
    labels = np.asarray(labels, dtype=np.int64)
    if q.ndim != 2:
        raise ShapeError(f"cross_entropy: expected [batch, classes], got {q.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= q.shape[1]):
        raise ValueError(f"labels must lie in [0, {q.shape[1]})")
    picked = ops.pick(q, labels)
    return ops.scale(ops.mean(ops.log(picked, floor=PROB_FLOOR)), -1.0)


def kl_rows(t: Tensor, q: Tensor) -> Tensor:
    """Per-row KL(t || q) summed over the last axis; 0*log(0/.) contributes 0."""
    _check_pair("kl", t, q)
    log_ratio = ops.sub(ops.log(t, floor=PROB_FLOOR), ops.log(q, floor=PROB_FLOOR))
    return ops.sum(ops.mul(t, log_ratio), axis=-1)


def kl_divergence(t: Tensor, q: Tensor) -> Tensor:
    """Batch-mean KL(t || q) for [batch, classes] probability rows."""
    if t.ndim != 2:
        raise ShapeError(f"kl_divergence: expected [batch, classes], got {t.shape}")
    return ops.mean(kl_rows(t, q))


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
