"""Mixed-content sample generation.

Pastes outlier patches into training images below a horizon line, optionally
histogram-matching their colors against the sub-horizon background, blurring
the alpha mask, alpha-blending, and rewriting the label map: final alpha
above 0.5 becomes OUTLIER, alpha in (0, 0.5] becomes IGNORE, untouched pixels
keep their labels.

Per-record RNG states are derived from (seed, record index) through
SeedSequence, so batch output is independent of processing order and worker
count.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import IGNORE_ID, OUTLIER_ID
from .imageops import alpha_blend, gaussian_blur_mask
from .imageops import histogram_match as _histogram_match
from .io import Manifest, read_image, read_label_map, write_image, write_label_map
from .negatives import NegativeCatalog, Patch, PatchRetryError, ShapeMode, draw_patch
from .negatives import _resize_bilinear, _resize_nearest


class PlacementError(ValueError):
    """Patch too tall for the sub-horizon band; rescale it."""


@dataclass(frozen=True)
class PasteParams:
    horizon_fraction: float = 0.4
    alpha_range: tuple[float, float] = (0.65, 0.9)
    blur_sigma_coeff: float = 0.02  # sigma = coeff * max(patch dims); 0 disables
    blur_sigma_clamp: tuple[float, float] = (0.5, 5.0)
    hist_match: bool = True
    rectangle_prob: float = 0.5
    pastes_per_image: tuple[int, int] = (1, 3)
    scale_range: tuple[float, float] = (0.005, 0.05)

    def __post_init__(self):
        if not 0.0 <= self.horizon_fraction <= 1.0:
            raise ValueError(f"horizon_fraction must be in [0,1], got {self.horizon_fraction}")
        for name in ("alpha_range", "pastes_per_image", "scale_range", "blur_sigma_clamp"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lo {lo} > hi {hi}")
        if not 0.0 <= self.rectangle_prob <= 1.0:
            raise ValueError(f"rectangle_prob must be in [0,1], got {self.rectangle_prob}")

    @classmethod
    def from_dict(cls, d: dict) -> "PasteParams":
        kwargs = {}
        for f in cls.__dataclass_fields__:
            if f in d:
                v = d[f]
                kwargs[f] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


@dataclass
class PasteRecord:
    origin: tuple[int, int]
    patch_dims: tuple[int, int]
    mode: str
    alpha: float
    sigma: float
    source: str

    def to_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "patch_dims": list(self.patch_dims),
            "mode": self.mode,
            "alpha": self.alpha,
            "sigma": self.sigma,
            "source": self.source,
        }


@dataclass
class MixedSample:
    image: np.ndarray
    labels: np.ndarray
    paste_log: list[PasteRecord] = field(default_factory=list)
    # per-pixel alpha of the last paste covering each pixel; reconstruction aid
    composite_alpha: np.ndarray | None = None


def sample_placement(
    image_dims: tuple[int, int],
    patch_dims: tuple[int, int],
    horizon_fraction: float,
    rng: np.random.Generator,
) -> tuple[int, int]:
    """Uniform top-left origin with the patch fully below the horizon row."""
    ih, iw = image_dims
    ph, pw = patch_dims
    horizon_row = int(np.floor(horizon_fraction * ih))
    if ph > ih - horizon_row or pw > iw:
        raise PlacementError(
            f"patch {ph}x{pw} does not fit below horizon row {horizon_row} "
            f"in {ih}x{iw} image; rescale patch"
        )
    r = int(rng.integers(horizon_row, ih - ph + 1))
    c = int(rng.integers(0, iw - pw + 1))
    return r, c


def _blur_sigma(params: PasteParams, patch_dims: tuple[int, int]) -> float:
    if params.blur_sigma_coeff <= 0:
        return 0.0
    sigma = params.blur_sigma_coeff * max(patch_dims)
    lo, hi = params.blur_sigma_clamp
    return float(np.clip(sigma, lo, hi))


def _shrink_patch(patch: Patch, factor: float = 0.7) -> Patch:
    h = max(1, int(patch.image.shape[0] * factor))
    w = max(1, int(patch.image.shape[1] * factor))
    img = _resize_bilinear(patch.image, h, w)
    mask = _resize_nearest(patch.mask, h, w)
    return Patch(img, mask, patch.source, patch.mode)


def paste_outlier(
    image: np.ndarray,
    labels: np.ndarray,
    patch: Patch,
    params: PasteParams,
    rng: np.random.Generator,
    composite_alpha: np.ndarray | None = None,
) -> MixedSample:
    """Apply the full paste pipeline for one patch.

    Order: histogram match (optional), mask blur scaled by the drawn alpha,
    alpha blend, label rewrite. An infeasible placement is retried with a
    shrunken patch up to 10 times; if it never fits, the sample is returned
    unmodified with an empty paste log.
    """
    ih, iw = labels.shape
    if image.shape[:2] != (ih, iw):
        raise ValueError(f"image {image.shape[:2]} does not match labels {labels.shape}")
    horizon_row = int(np.floor(params.horizon_fraction * ih))

    sigma = _blur_sigma(params, patch.image.shape[:2])
    if sigma > 0:
        # pad by the blur radius so the mask edge falls off into zeros instead
        # of being preserved by border renormalization
        radius = int(np.ceil(3.0 * sigma))
        patch = Patch(
            np.pad(patch.image, ((radius, radius), (radius, radius), (0, 0)), mode="edge"),
            np.pad(patch.mask, radius),
            patch.source,
            patch.mode,
        )

    for _ in range(10):
        try:
            origin = sample_placement(
                (ih, iw), patch.image.shape[:2], params.horizon_fraction, rng
            )
            break
        except PlacementError:
            patch = _shrink_patch(patch)
    else:
        return MixedSample(image.copy(), labels.copy(), [], composite_alpha)

    patch_img = patch.image
    if params.hist_match:
        reference = image[horizon_row:, :, :].reshape(-1, 3)
        if reference.size == 0:
            reference = image.reshape(-1, 3)
        patch_img = _histogram_match(patch_img, reference)

    alpha = float(rng.uniform(*params.alpha_range))
    mask = patch.mask
    if sigma > 0:
        mask = gaussian_blur_mask(mask, sigma)
    final_alpha = mask * alpha

    out_image = alpha_blend(image, patch_img, final_alpha, origin)
    out_labels = labels.copy()
    r, c = origin
    ph, pw = final_alpha.shape
    region = out_labels[r : r + ph, c : c + pw]
    region[final_alpha > 0.5] = OUTLIER_ID
    region[(final_alpha > 0.0) & (final_alpha <= 0.5)] = IGNORE_ID

    if composite_alpha is None:
        composite_alpha = np.zeros((ih, iw), dtype=np.float64)
    else:
        composite_alpha = composite_alpha.copy()
    ca_region = composite_alpha[r : r + ph, c : c + pw]
    covered = final_alpha > 0.0
    ca_region[covered] = final_alpha[covered]

    record = PasteRecord(
        origin=origin,
        patch_dims=(ph, pw),
        mode=patch.mode.value,
        alpha=alpha,
        sigma=sigma,
        source=patch.source.image_ref,
    )
    return MixedSample(out_image, out_labels, [record], composite_alpha)


def mix_sample(
    image: np.ndarray,
    labels: np.ndarray,
    catalog: NegativeCatalog,
    params: PasteParams,
    rng: np.random.Generator,
) -> MixedSample:
    """Paste a random number of patches (params.pastes_per_image) into one sample."""
    n_pastes = int(rng.integers(params.pastes_per_image[0], params.pastes_per_image[1] + 1))
    result = MixedSample(image.copy(), labels.copy(), [], None)
    for _ in range(n_pastes):
        try:
            patch = draw_patch(
                catalog, rng, labels.shape, params.rectangle_prob, params.scale_range
            )
        except PatchRetryError:
            continue
        step = paste_outlier(
            result.image, result.labels, patch, params, rng, result.composite_alpha
        )
        result = MixedSample(
            step.image, step.labels, result.paste_log + step.paste_log,
            step.composite_alpha,
        )
    return result


def record_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-style per-record generator: mixes (seed, index) via SeedSequence."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _generate_one(args):
    index, image_path, label_path, stem, catalog, params, seed, out_dir = args
    try:
        image = read_image(image_path)
        labels = read_label_map(label_path)
    except Exception as e:
        return {"index": index, "stem": stem, "error": str(e)}
    mixed = mix_sample(image, labels, catalog, params, record_rng(seed, index))
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_image(out_dir / f"{stem}.png", mixed.image)
        write_label_map(out_dir / f"{stem}_labels.png", mixed.labels)
        (out_dir / f"{stem}_paste.json").write_text(
            json.dumps([p.to_dict() for p in mixed.paste_log], indent=2) + "\n"
        )
    return {"index": index, "stem": stem, "pastes": len(mixed.paste_log), "error": None}


def generate_mixed_batch(
    manifest: Manifest,
    catalog: NegativeCatalog,
    params: PasteParams,
    seed: int,
    out_dir=None,
    workers: int = 1,
):
    """Generate one MixedSample per manifest record; deterministic per (seed, index).

    Unreadable records yield error entries; the batch continues. Returns the
    list of per-record result dicts in manifest order.
    """
    if len(manifest) == 0:
        raise ValueError("manifest is empty")
    if len(catalog) == 0:
        raise ValueError("negative catalog is empty")
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    tasks = []
    for index, rec in enumerate(manifest.records):
        image_path, label_path = manifest.resolve(rec)
        stem = Path(rec.image).stem
        tasks.append((index, image_path, label_path, stem, catalog, params, seed, out_dir))
    if workers <= 1:
        results = [_generate_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_generate_one, tasks))
    return results
