"""Negative (outlier-source) dataset management.

A catalog lists negative samples with the exact set of class ids present in
each label map. Samples containing any excluded (training) class are filtered
out; the survivors supply patches with rectangular or class-shaped alpha
masks.

Catalog manifest: JSON Lines, {"image": path, "label": path, "classes": [ids]}.
Class-mapping config: JSON object {class_name: {"id": int, "excluded": bool}}.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .io import read_image, read_label_map

MIN_CLASS_PIXELS = 32  # smaller regions make invisible outliers; resample


class PatchRetryError(RuntimeError):
    """Sample has no usable class region; retry with another sample."""


class ShapeMode(Enum):
    RECTANGLE = "rectangle"
    CLASS_SHAPE = "class_shape"


@dataclass(frozen=True)
class NegativeSample:
    image_ref: str
    label_ref: str
    present_classes: frozenset[int]


@dataclass
class NegativeCatalog:
    samples: list[NegativeSample]
    source_name: str = ""
    root: Path = Path(".")

    def __len__(self):
        return len(self.samples)


@dataclass
class Patch:
    image: np.ndarray  # (h, w, 3) uint8
    mask: np.ndarray  # (h, w) float in [0, 1]
    source: NegativeSample
    mode: ShapeMode


def load_catalog(path, source_name: str = "") -> NegativeCatalog:
    """Load a JSONL catalog manifest; samples sorted by image path."""
    path = Path(path)
    samples = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            for key in ("image", "label", "classes"):
                if key not in obj:
                    raise ValueError(f"{path}:{lineno}: missing {key!r} key")
            samples.append(
                NegativeSample(
                    obj["image"], obj["label"], frozenset(int(c) for c in obj["classes"])
                )
            )
    samples.sort(key=lambda s: s.image_ref)
    return NegativeCatalog(samples, source_name or path.stem, root=path.parent)


def load_class_mapping(path) -> dict[str, dict]:
    with open(path) as f:
        return json.load(f)


def excluded_ids(mapping: dict[str, dict]) -> set[int]:
    return {int(v["id"]) for v in mapping.values() if v.get("excluded", False)}


def filter_catalog(catalog: NegativeCatalog, excluded: set[int]) -> NegativeCatalog:
    """Keep only samples whose present classes avoid `excluded`; order preserved."""
    kept = [s for s in catalog.samples if not (s.present_classes & excluded)]
    return NegativeCatalog(kept, catalog.source_name, catalog.root)


def _resize_nearest(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.int64)
    return arr[rows][:, cols]


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    r = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    c = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (r - r0)[:, None, None]
    fc = (c - c0)[None, :, None]
    v = img.astype(np.float64)
    top = v[r0][:, c0] * (1 - fc) + v[r0][:, c1] * fc
    bot = v[r1][:, c0] * (1 - fc) + v[r1][:, c1] * fc
    out = top * (1 - fr) + bot * fr
    return np.floor(out + 0.5).astype(np.uint8)


def _scaled_dims(h: int, w: int, target_area: float) -> tuple[int, int]:
    factor = np.sqrt(target_area / (h * w))
    return max(1, round(h * factor)), max(1, round(w * factor))


def extract_patch(
    sample: NegativeSample,
    mode: ShapeMode,
    scale: float,
    rng: np.random.Generator,
    target_dims: tuple[int, int],
    root: Path = Path("."),
) -> Patch:
    """Extract a patch whose area is about scale * (target image area).

    Rectangle mode crops a random region with an all-ones mask. Class-shape
    mode picks 1 or 2 classes present in the sample and uses their pixel
    indicator within the joint bounding box. The image is resized bilinearly,
    the mask with nearest-neighbor.
    """
    image = read_image(root / sample.image_ref)
    ih, iw = image.shape[:2]
    target_area = scale * target_dims[0] * target_dims[1]

    if mode is ShapeMode.RECTANGLE:
        aspect = rng.uniform(0.5, 2.0)
        ch = int(np.clip(round(np.sqrt(target_area * aspect)), 4, ih))
        cw = int(np.clip(round(np.sqrt(target_area / aspect)), 4, iw))
        r0 = int(rng.integers(0, ih - ch + 1))
        c0 = int(rng.integers(0, iw - cw + 1))
        crop = image[r0 : r0 + ch, c0 : c0 + cw]
        out_h, out_w = _scaled_dims(ch, cw, target_area)
        patch_img = _resize_bilinear(crop, out_h, out_w)
        mask = np.ones((out_h, out_w), dtype=np.float64)
        return Patch(patch_img, mask, sample, mode)

    labels = read_label_map(root / sample.label_ref)
    candidates = sorted(sample.present_classes)
    if not candidates:
        raise PatchRetryError(f"{sample.image_ref}: no classes to extract")
    n_pick = int(rng.integers(1, 3))  # 1 or 2 classes, equal probability
    n_pick = min(n_pick, len(candidates))
    picked = rng.choice(candidates, size=n_pick, replace=False)
    indicator = np.isin(labels, picked)
    if indicator.sum() < MIN_CLASS_PIXELS:
        raise PatchRetryError(
            f"{sample.image_ref}: classes {sorted(int(p) for p in picked)} cover "
            f"{int(indicator.sum())} pixels (< {MIN_CLASS_PIXELS})"
        )
    rows = np.any(indicator, axis=1)
    cols = np.any(indicator, axis=0)
    r0, r1 = np.where(rows)[0][[0, -1]]
    c0, c1 = np.where(cols)[0][[0, -1]]
    crop = image[r0 : r1 + 1, c0 : c1 + 1]
    crop_mask = indicator[r0 : r1 + 1, c0 : c1 + 1].astype(np.float64)
    out_h, out_w = _scaled_dims(crop.shape[0], crop.shape[1], target_area)
    patch_img = _resize_bilinear(crop, out_h, out_w)
    mask = _resize_nearest(crop_mask, out_h, out_w)
    if mask.sum() < 1:
        raise PatchRetryError(f"{sample.image_ref}: mask vanished after resize")
    return Patch(patch_img, mask, sample, mode)


def draw_patch(
    catalog: NegativeCatalog,
    rng: np.random.Generator,
    target_dims: tuple[int, int],
    rectangle_prob: float,
    scale_range: tuple[float, float],
    max_attempts: int = 10,
) -> Patch:
    """Sample a catalog entry and extract a patch, retrying degenerate regions."""
    if len(catalog) == 0:
        raise ValueError("negative catalog is empty")
    last_err = None
    for _ in range(max_attempts):
        sample = catalog.samples[int(rng.integers(0, len(catalog)))]
        mode = (
            ShapeMode.RECTANGLE
            if rng.uniform() < rectangle_prob
            else ShapeMode.CLASS_SHAPE
        )
        scale = rng.uniform(*scale_range)
        try:
            return extract_patch(sample, mode, scale, rng, target_dims, catalog.root)
        except PatchRetryError as e:
            last_err = e
    raise PatchRetryError(f"no usable patch after {max_attempts} attempts: {last_err}")
