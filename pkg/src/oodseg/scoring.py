"""Per-pixel anomaly scores from segmentation logits and an optional OOD head.

All scores share one polarity: higher = more anomalous. The OOD head output
is handled pre-sigmoid everywhere; its log-probability is computed through a
negative softplus for stability.

Kinds:
  msp        1 - max softmax probability
  max_logit  negative max logit
  unnorm_nll negative log of the sum-exp of the logits
  hybrid     log sigmoid(ood logit) minus log-sum-exp of the logits
"""

from __future__ import annotations

import numpy as np

SCORE_KINDS = ("msp", "max_logit", "unnorm_nll", "hybrid")


def _check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def log_sum_exp(logits, axis: int = -1) -> np.ndarray | float:
    """Shift-stabilized log(sum(exp(logits))) along `axis`."""
    v = _check_finite(logits, "logits")
    m = np.max(v, axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.sum(np.exp(v - m), axis=axis))
    return float(out) if np.ndim(out) == 0 else out


def softmax(logits, axis: int = -1) -> np.ndarray:
    v = _check_finite(logits, "logits")
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def softplus(x) -> np.ndarray | float:
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return float(out) if np.ndim(out) == 0 else out


def sigmoid(x) -> np.ndarray | float:
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
    return float(out) if np.ndim(out) == 0 else out


def msp_score(logits, axis: int = -1):
    """1 - max softmax probability."""
    p = softmax(logits, axis=axis)
    out = 1.0 - np.max(p, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def max_logit_score(logits, axis: int = -1):
    """Negative max logit."""
    v = _check_finite(logits, "logits")
    out = -np.max(v, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def unnorm_nll_score(logits, axis: int = -1):
    """Negative log of the unnormalized likelihood sum(exp(logits))."""
    out = log_sum_exp(logits, axis=axis)
    return -out if np.ndim(out) == 0 else -out


def hybrid_score(ood_logit, logits, axis: int = -1):
    """log sigmoid(ood) - log-sum-exp(logits), via -softplus(-ood) - lse."""
    z = _check_finite(ood_logit, "ood_logit")
    lse = log_sum_exp(logits, axis=axis)
    out = -softplus(-z) - lse
    return float(out) if np.ndim(out) == 0 else out


def score_map(
    logits: np.ndarray, kind: str, ood_logits: np.ndarray | None = None
) -> np.ndarray:
    """Elementwise (H, W) score map from an (H, W, K) logit volume."""
    v = _check_finite(logits, "logits")
    if v.ndim != 3 or v.shape[2] < 2:
        raise ValueError(f"logit volume must be (H, W, K>=2), got {v.shape}")
    if kind == "msp":
        return msp_score(v)
    if kind == "max_logit":
        return max_logit_score(v)
    if kind == "unnorm_nll":
        return unnorm_nll_score(v)
    if kind == "hybrid":
        if ood_logits is None:
            raise ValueError("hybrid score requires an OOD logit map")
        z = _check_finite(ood_logits, "ood_logits")
        if z.shape != v.shape[:2]:
            raise ValueError(f"ood map {z.shape} does not match volume {v.shape[:2]}")
        return hybrid_score(z, v)
    raise ValueError(f"unknown score kind {kind!r}; expected one of {SCORE_KINDS}")
