"""Loss parts and weighted composites for the hybrid anomaly detector.

Parts, each with its analytic gradient with respect to the logits or the OOD
head pre-activations:

  seg     mean cross-entropy over inlier pixels
  ood     binary OOD-head loss: mean softplus(z) on inliers plus mean
          softplus(-z) on outliers (two separate means, summed)
  lx_in   mean of -lse(logits) over inlier pixels (maximize inlier likelihood)
  lx_out  mean of +lse(logits) over outlier pixels (minimize outlier
          likelihood)

The lse terms are clamped to [-30, 30] with zero gradient beyond: lx_out is
unbounded below, and the clamp keeps toy training stable.

IGNORE pixels contribute to nothing. Empty populations yield a zero term with
a flag rather than an error, since mixed batches may lack pastes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import IGNORE_ID, OUTLIER_ID
from .scoring import sigmoid, softmax, softplus

LSE_CLAMP = 30.0

PRESETS = {
    "dh": {"beta1": 0.01, "beta2": 0.0, "beta3": 0.1, "stop_ood_grad": False},
    "dh2": {"beta1": 0.01, "beta2": 0.005, "beta3": 0.2, "stop_ood_grad": False},
    "sd": {"beta1": 0.01, "beta2": 0.01, "beta3": 0.0, "stop_ood_grad": True},
}


@dataclass(frozen=True)
class LossWeights:
    beta1: float  # weight of lx_out
    beta2: float  # weight of lx_in
    beta3: float  # weight of ood

    def __post_init__(self):
        for name in ("beta1", "beta2", "beta3"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {list(PRESETS)}")
        p = PRESETS[name]
        return cls(p["beta1"], p["beta2"], p["beta3"])


@dataclass
class LossReport:
    l_seg: float
    l_ood: float
    l_x_in: float
    l_x_out: float
    total: float
    grad_logits: np.ndarray
    grad_ood: np.ndarray | None
    n_inlier: int
    n_outlier: int
    n_ignore: int
    flags: dict = field(default_factory=dict)


def _masks(labels: np.ndarray):
    ignore = labels == IGNORE_ID
    outlier = labels == OUTLIER_ID
    inlier = ~ignore & ~outlier
    return inlier, outlier, ignore


def _check_dims(volume: np.ndarray, labels: np.ndarray):
    if volume.ndim != 3:
        raise ValueError(f"logit volume must be (H, W, K), got {volume.shape}")
    if labels.shape != volume.shape[:2]:
        raise ValueError(f"labels {labels.shape} do not match volume {volume.shape[:2]}")


def loss_seg(volume: np.ndarray, labels: np.ndarray):
    """Mean per-inlier-pixel softmax cross-entropy. Returns (value, grad, flag)."""
    volume = np.asarray(volume, dtype=np.float64)
    _check_dims(volume, labels)
    inlier, _, _ = _masks(labels)
    grad = np.zeros_like(volume)
    n_in = int(inlier.sum())
    if n_in == 0:
        return 0.0, grad, True
    logits = volume[inlier]
    targets = labels[inlier].astype(np.int64)
    p = softmax(logits)
    m = np.max(logits, axis=-1)
    lse = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=-1))
    nll = lse - logits[np.arange(n_in), targets]
    value = float(nll.mean())
    g = p.copy()
    g[np.arange(n_in), targets] -= 1.0
    grad[inlier] = g / n_in
    return value, grad, False


def loss_ood(ood: np.ndarray, labels: np.ndarray):
    """OOD-head loss on pre-sigmoid logits. Returns (value, grad, flags)."""
    z = np.asarray(ood, dtype=np.float64)
    if z.shape != labels.shape:
        raise ValueError(f"ood map {z.shape} does not match labels {labels.shape}")
    inlier, outlier, _ = _masks(labels)
    grad = np.zeros_like(z)
    flags = {}
    value = 0.0
    n_in = int(inlier.sum())
    n_out = int(outlier.sum())
    if n_in > 0:
        value += float(np.mean(softplus(z[inlier])))
        grad[inlier] = sigmoid(z[inlier]) / n_in
    else:
        flags["no_inliers"] = True
    if n_out > 0:
        value += float(np.mean(softplus(-z[outlier])))
        grad[outlier] = (sigmoid(z[outlier]) - 1.0) / n_out
    else:
        flags["no_outliers"] = True
    return value, grad, flags


def _lse_and_grad(logits: np.ndarray):
    """Clamped lse of an (N, K) block plus the softmax gradient, zero where clamped."""
    m = np.max(logits, axis=-1)
    lse = m + np.log(np.sum(np.exp(logits - m[:, None]), axis=-1))
    clamped = np.clip(lse, -LSE_CLAMP, LSE_CLAMP)
    active = np.abs(lse) < LSE_CLAMP
    g = softmax(logits)
    g[~active] = 0.0
    return clamped, g


def loss_lx_in(volume: np.ndarray, labels: np.ndarray):
    """Mean of -lse over inlier pixels. Returns (value, grad, flag)."""
    volume = np.asarray(volume, dtype=np.float64)
    _check_dims(volume, labels)
    inlier, _, _ = _masks(labels)
    grad = np.zeros_like(volume)
    n_in = int(inlier.sum())
    if n_in == 0:
        return 0.0, grad, True
    lse, g = _lse_and_grad(volume[inlier])
    value = float(np.mean(-lse))
    grad[inlier] = -g / n_in
    return value, grad, False


def loss_lx_out(volume: np.ndarray, labels: np.ndarray):
    """Mean of +lse over outlier pixels. Returns (value, grad, flag)."""
    volume = np.asarray(volume, dtype=np.float64)
    _check_dims(volume, labels)
    _, outlier, _ = _masks(labels)
    grad = np.zeros_like(volume)
    n_out = int(outlier.sum())
    if n_out == 0:
        return 0.0, grad, True
    lse, g = _lse_and_grad(volume[outlier])
    value = float(np.mean(lse))
    grad[outlier] = g / n_out
    return value, grad, False


def composite_loss(
    volume: np.ndarray,
    ood: np.ndarray | None,
    labels: np.ndarray,
    weights: LossWeights,
    stop_ood_grad: bool = False,
) -> LossReport:
    """Weighted total beta1*lx_out + beta2*lx_in + beta3*ood + seg with gradients.

    stop_ood_grad zeroes grad_ood regardless of beta3 (the simplified-detector
    semantics: the OOD head receives no updates).
    """
    volume = np.asarray(volume, dtype=np.float64)
    _check_dims(volume, labels)
    inlier, outlier, ignore = _masks(labels)
    flags = {}

    l_seg, g_seg, f_seg = loss_seg(volume, labels)
    if f_seg:
        flags["no_inliers"] = True
    l_in, g_in, f_in = loss_lx_in(volume, labels)
    l_out, g_out, f_out = loss_lx_out(volume, labels)
    if f_out:
        flags["no_outliers"] = True

    if ood is not None:
        l_ood, g_ood, ood_flags = loss_ood(ood, labels)
        grad_ood = weights.beta3 * g_ood
        if stop_ood_grad:
            grad_ood = np.zeros_like(g_ood)
        flags.update(ood_flags)
    else:
        l_ood = 0.0
        grad_ood = None
        flags["no_ood_head"] = True

    total = (
        weights.beta1 * l_out + weights.beta2 * l_in + weights.beta3 * l_ood + l_seg
    )
    grad_logits = weights.beta1 * g_out + weights.beta2 * g_in + g_seg
    return LossReport(
        l_seg=l_seg,
        l_ood=l_ood,
        l_x_in=l_in,
        l_x_out=l_out,
        total=float(total),
        grad_logits=grad_logits,
        grad_ood=grad_ood,
        n_inlier=int(inlier.sum()),
        n_outlier=int(outlier.sum()),
        n_ignore=int(ignore.sum()),
        flags=flags,
    )


def preset_loss(
    volume: np.ndarray, ood: np.ndarray | None, labels: np.ndarray, preset: str
) -> LossReport:
    """composite_loss under a named preset ("dh", "dh2", "sd")."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {list(PRESETS)}")
    return composite_loss(
        volume,
        ood,
        labels,
        LossWeights.preset(preset),
        stop_ood_grad=PRESETS[preset]["stop_ood_grad"],
    )
