"""Desk-scale end-to-end validation.

A tiny per-pixel convolutional classifier (two 3x3 conv + ReLU layers, a 1x1
segmentation head, and a 1x1 OOD head) trained with plain gradient descent on
a synthetic "shapes world" dataset. One shape/color is held out of training
and plays the anomaly in the test split; synthetic training outliers are
random-colored blobs pasted through the compositor.

All forward/backward math is plain numpy with manual reverse-mode gradients;
everything is deterministic given the seeds.
"""

from __future__ import annotations

import io as _io
import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import IGNORE_ID, OUTLIER_ID
from .compositor import PasteParams, paste_outlier
from .losses import PRESETS, LossReport, LossWeights, composite_loss
from .negatives import NegativeSample, Patch, ShapeMode

CKPT_MAGIC = b"OODSEGCKPT1\n"


class TrainingDivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# model


@dataclass
class ToyModel:
    """Two same-padded 3x3 conv layers with ReLU, plus 1x1 seg and OOD heads."""

    w1: np.ndarray  # (3, 3, 3, k)
    b1: np.ndarray  # (k,)
    w2: np.ndarray  # (3, 3, k, k)
    b2: np.ndarray  # (k,)
    w_seg: np.ndarray  # (k, K)
    b_seg: np.ndarray  # (K,)
    w_ood: np.ndarray  # (k, 1)
    b_ood: np.ndarray  # (1,)

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w_seg", "b_seg", "w_ood", "b_ood")

    @property
    def width(self) -> int:
        return self.w1.shape[3]

    @property
    def num_classes(self) -> int:
        return self.w_seg.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "ToyModel":
        return ToyModel(**{k: v.copy() for k, v in self.params().items()})

    @classmethod
    def init(cls, num_classes: int = 4, width: int = 16, seed: int = 0) -> "ToyModel":
        """Uniform +-sqrt(1/fan_in) initialization from a seeded generator."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10DE]))

        def uniform(shape, fan_in):
            bound = np.sqrt(1.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            w1=uniform((3, 3, 3, width), 27),
            b1=np.zeros(width),
            w2=uniform((3, 3, width, width), 9 * width),
            b2=np.zeros(width),
            w_seg=uniform((width, num_classes), width),
            b_seg=np.zeros(num_classes),
            w_ood=uniform((width, 1), width),
            b_ood=np.zeros(1),
        )


def _conv3x3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Same-padded 3x3 cross-correlation; x is (H, W, Cin), w is (3, 3, Cin, Cout)."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, Cin, 3, 3)
    return np.tensordot(win, w, axes=([2, 3, 4], [2, 0, 1]))


def _conv3x3_input_grad(gout: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient of _conv3x3 w.r.t. its input: correlate gout with the flipped kernel."""
    w_flip = w[::-1, ::-1]  # (3, 3, Cin, Cout)
    gp = np.pad(gout, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(gp, (3, 3), axis=(0, 1))  # (H, W, Cout, 3, 3)
    return np.tensordot(win, w_flip, axes=([2, 3, 4], [3, 0, 1]))


def _conv3x3_weight_grad(x: np.ndarray, gout: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))  # (H, W, Cin, 3, 3)
    # sum over spatial positions -> (3, 3, Cin, Cout)
    g = np.tensordot(win, gout, axes=([0, 1], [0, 1]))  # (Cin, 3, 3, Cout)
    return np.transpose(g, (1, 2, 0, 3))


def forward(model: ToyModel, image: np.ndarray, cache: dict | None = None):
    """Logit volume (H, W, K) and OOD logit map (H, W) for one RGB image.

    Pass a dict as `cache` to capture intermediates for backward().
    """
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ValueError(f"input must be at least 8x8, got {image.shape[:2]}")
    x = image.astype(np.float64) / 255.0
    pre1 = _conv3x3(x, model.w1) + model.b1
    f1 = np.maximum(pre1, 0.0)
    pre2 = _conv3x3(f1, model.w2) + model.b2
    f2 = np.maximum(pre2, 0.0)
    logits = f2 @ model.w_seg + model.b_seg
    ood = (f2 @ model.w_ood + model.b_ood)[..., 0]
    if cache is not None:
        cache.update(x=x, pre1=pre1, f1=f1, pre2=pre2, f2=f2)
    return logits, ood


def backward(
    model: ToyModel,
    cache: dict,
    grad_logits: np.ndarray,
    grad_ood: np.ndarray | None,
) -> dict[str, np.ndarray]:
    """Parameter gradients from per-pixel loss gradients on the two heads."""
    f2 = cache["f2"]
    grads = {}
    grads["w_seg"] = np.tensordot(f2, grad_logits, axes=([0, 1], [0, 1]))
    grads["b_seg"] = grad_logits.sum(axis=(0, 1))
    g_f2 = grad_logits @ model.w_seg.T
    if grad_ood is not None:
        go = grad_ood[..., None]
        grads["w_ood"] = np.tensordot(f2, go, axes=([0, 1], [0, 1]))
        grads["b_ood"] = go.sum(axis=(0, 1))
        g_f2 = g_f2 + go @ model.w_ood.T
    else:
        grads["w_ood"] = np.zeros_like(model.w_ood)
        grads["b_ood"] = np.zeros_like(model.b_ood)
    g_pre2 = g_f2 * (cache["pre2"] > 0)
    grads["w2"] = _conv3x3_weight_grad(cache["f1"], g_pre2)
    grads["b2"] = g_pre2.sum(axis=(0, 1))
    g_f1 = _conv3x3_input_grad(g_pre2, model.w2)
    g_pre1 = g_f1 * (cache["pre1"] > 0)
    grads["w1"] = _conv3x3_weight_grad(cache["x"], g_pre1)
    grads["b1"] = g_pre1.sum(axis=(0, 1))
    return grads


# ---------------------------------------------------------------------------
# shapes-world dataset


@dataclass(frozen=True)
class ShapesConfig:
    image_size: int = 64
    num_train: int = 200
    num_test: int = 50
    num_classes: int = 4  # background + 3 shape classes
    noise_level: float = 6.0
    # held-out anomaly: a magenta blob, far in color from every inlier class
    outlier_color: tuple[int, int, int] = (225, 35, 225)

    INLIER_COLORS = (
        (90, 90, 90),  # background
        (205, 45, 45),  # squares
        (45, 195, 45),  # circles
        (45, 45, 205),  # triangles
    )

    def __post_init__(self):
        if self.num_classes < 2 or self.num_classes > len(self.INLIER_COLORS):
            raise ValueError(f"num_classes must be in [2, 4], got {self.num_classes}")


def _draw_shape(labels, image, kind: int, color, class_id: int, rng, size: int):
    h, w = labels.shape
    s = int(rng.integers(size // 2, size + 1))
    r0 = int(rng.integers(s, h - s))
    c0 = int(rng.integers(s, w - s))
    rr, cc = np.mgrid[0:h, 0:w]
    if kind == 0:  # square
        mask = (np.abs(rr - r0) <= s) & (np.abs(cc - c0) <= s)
    elif kind == 1:  # circle
        mask = (rr - r0) ** 2 + (cc - c0) ** 2 <= s * s
    else:  # triangle pointing up
        mask = (rr >= r0 - s) & (rr <= r0 + s) & (np.abs(cc - c0) * 2 <= (rr - (r0 - s)))
    labels[mask] = class_id
    image[mask] = color
    return mask


def _render_sample(config: ShapesConfig, rng, with_outlier: bool):
    n = config.image_size
    image = np.empty((n, n, 3), dtype=np.float64)
    image[:] = config.INLIER_COLORS[0]
    labels = np.zeros((n, n), dtype=np.uint8)
    n_shapes = int(rng.integers(2, 5))
    for _ in range(n_shapes):
        cls = int(rng.integers(1, config.num_classes))
        kind = cls - 1
        _draw_shape(
            labels, image, kind, config.INLIER_COLORS[cls], cls, rng, n // 8
        )
    if with_outlier:
        n_out = int(rng.integers(1, 3))
        placed = 0
        while placed < n_out:
            kind = int(rng.integers(0, 3))
            mask = _draw_shape(
                labels, image, kind, config.outlier_color, OUTLIER_ID, rng, n // 8
            )
            if mask.sum() > 0:
                placed += 1
    image += rng.normal(0.0, config.noise_level, size=image.shape)
    image = np.clip(np.floor(image + 0.5), 0, 255).astype(np.uint8)
    return image, labels


def make_shapes_dataset(config: ShapesConfig, seed: int):
    """(train, test) lists of (image, labels).

    Train labels contain only inlier ids; every test sample contains at least
    one OUTLIER pixel. Deterministic given (config, seed).
    """
    train = []
    for i in range(config.num_train):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0, i]))
        train.append(_render_sample(config, rng, with_outlier=False))
    test = []
    for i in range(config.num_test):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, i]))
        while True:
            image, labels = _render_sample(config, rng, with_outlier=True)
            if (labels == OUTLIER_ID).any():
                break
        test.append((image, labels))
    return train, test


_SYNTHETIC_SOURCE = NegativeSample("synthetic://blob", "synthetic://blob", frozenset())


def synthesize_negative_patch(
    rng: np.random.Generator,
    target_dims: tuple[int, int],
    scale_range: tuple[float, float] = (0.01, 0.05),
    avoid_colors=ShapesConfig.INLIER_COLORS,
    min_color_dist: float = 90.0,
) -> Patch:
    """Random-colored blob patch standing in for an external negative dataset.

    Colors are rejection-sampled away from the inlier palette so synthetic
    negatives never mimic training classes.
    """
    area = rng.uniform(*scale_range) * target_dims[0] * target_dims[1]
    side = max(6, int(round(np.sqrt(area))))
    while True:
        color = rng.uniform(0, 255, size=3)
        dists = [np.linalg.norm(color - np.asarray(c)) for c in avoid_colors]
        if min(dists) >= min_color_dist:
            break
    img = np.empty((side, side, 3), dtype=np.float64)
    img[:] = color
    img += rng.normal(0.0, 6.0, size=img.shape)
    img = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    rr, cc = np.mgrid[0:side, 0:side]
    mid = (side - 1) / 2.0
    if rng.uniform() < 0.5:
        mask = np.ones((side, side), dtype=np.float64)
        mode = ShapeMode.RECTANGLE
    else:
        mask = (((rr - mid) ** 2 + (cc - mid) ** 2) <= mid * mid).astype(np.float64)
        if mask.sum() < 1:
            mask = np.ones((side, side), dtype=np.float64)
        mode = ShapeMode.CLASS_SHAPE
    return Patch(img, mask, _SYNTHETIC_SOURCE, mode)


def mix_training_data(
    train: list, seed: int, params: PasteParams | None = None
) -> list:
    """Paste synthetic negative blobs into every training sample."""
    if params is None:
        params = PasteParams(
            horizon_fraction=0.0,  # shapes world has no horizon
            hist_match=False,
            blur_sigma_coeff=0.02,
            pastes_per_image=(1, 2),
        )
    mixed = []
    for i, (image, labels) in enumerate(train):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2, i]))
        n_pastes = int(
            rng.integers(params.pastes_per_image[0], params.pastes_per_image[1] + 1)
        )
        cur = (image, labels, None)
        for _ in range(n_pastes):
            patch = synthesize_negative_patch(rng, labels.shape, params.scale_range)
            step = paste_outlier(cur[0], cur[1], patch, params, rng, cur[2])
            cur = (step.image, step.labels, step.composite_alpha)
        mixed.append((cur[0], cur[1]))
    return mixed


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainRun:
    preset: str
    epochs: int
    lr: float
    seed: int
    history: list[dict] = field(default_factory=list)
    model: ToyModel | None = None


def batch_loss_and_grads(
    model: ToyModel,
    batch: list,
    weights: LossWeights,
    stop_ood_grad: bool,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Mean composite loss over a batch plus parameter gradients.

    Per-image losses and gradients are averaged in batch order (deterministic
    sequential reduction).
    """
    agg = None
    parts = np.zeros(5)
    for image, labels in batch:
        cache = {}
        logits, ood = forward(model, image, cache)
        report = composite_loss(logits, ood, labels, weights, stop_ood_grad)
        grads = backward(
            model,
            cache,
            report.grad_logits,
            report.grad_ood if not stop_ood_grad else None,
        )
        if agg is None:
            agg = grads
        else:
            for k in agg:
                agg[k] += grads[k]
        parts += (report.l_seg, report.l_ood, report.l_x_in, report.l_x_out, report.total)
    n = len(batch)
    for k in agg:
        agg[k] /= n
    parts /= n
    summary = LossReport(
        l_seg=parts[0], l_ood=parts[1], l_x_in=parts[2], l_x_out=parts[3],
        total=parts[4], grad_logits=np.empty(0), grad_ood=None,
        n_inlier=0, n_outlier=0, n_ignore=0,
    )
    return summary, agg


def train_toy(
    data: list,
    preset: str = "dh2",
    epochs: int = 30,
    lr: float = 0.05,
    seed: int = 0,
    num_classes: int = 4,
    width: int = 16,
    batch_size: int = 1,
    weights: LossWeights | None = None,
    model: ToyModel | None = None,
) -> TrainRun:
    """Plain fixed-lr gradient descent over mini-batches in fixed order.

    `weights` overrides the preset betas; gradient stopping still follows the
    preset. Any non-finite loss aborts with a diagnostic.
    """
    if not data:
        raise ValueError("training data is empty")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {list(PRESETS)}")
    if weights is None:
        weights = LossWeights.preset(preset)
    stop = PRESETS[preset]["stop_ood_grad"]
    if model is None:
        model = ToyModel.init(num_classes=num_classes, width=width, seed=seed)
    run = TrainRun(preset=preset, epochs=epochs, lr=lr, seed=seed, model=model)
    batches = [data[i : i + batch_size] for i in range(0, len(data), batch_size)]
    for epoch in range(epochs):
        totals = np.zeros(5)
        for batch in batches:
            summary, grads = batch_loss_and_grads(model, batch, weights, stop)
            if not np.isfinite(summary.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: total={summary.total}"
                )
            for name in model.PARAM_NAMES:
                getattr(model, name)[...] -= lr * grads[name]
            totals += (
                summary.l_seg, summary.l_ood, summary.l_x_in, summary.l_x_out,
                summary.total,
            )
        totals /= len(batches)
        run.history.append(
            {
                "epoch": epoch,
                "l_seg": totals[0],
                "l_ood": totals[1],
                "l_x_in": totals[2],
                "l_x_out": totals[3],
                "total": totals[4],
            }
        )
    return run


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: ToyModel, meta: dict | None = None) -> None:
    """Versioned binary blob: magic, length-prefixed JSON header, npz payload."""
    header = {
        "version": 1,
        "width": model.width,
        "num_classes": model.num_classes,
        **(meta or {}),
    }
    buf = _io.BytesIO()
    np.savez(buf, **model.params())
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[ToyModel, dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        payload = np.load(_io.BytesIO(f.read()))
    model = ToyModel(**{name: payload[name] for name in ToyModel.PARAM_NAMES})
    return model, header
