"""Pixel-level primitives: alpha blending, mask blurring, histogram matching.

Images are (H, W, 3) uint8 arrays, alpha masks are (H, W) float arrays in
[0, 1]. All functions are pure and deterministic.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import convolve1d

# Below this scale the discrete kernel degenerates to a delta.
BLUR_IDENTITY_SIGMA = 0.3


class DimensionMismatchError(ValueError):
    pass


def _check_image(img: np.ndarray, name: str = "image") -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionMismatchError(f"{name} must be (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionMismatchError(f"{name} must be non-empty, got {img.shape}")


def alpha_blend(
    background: np.ndarray,
    patch: np.ndarray,
    mask: np.ndarray,
    origin: tuple[int, int],
) -> np.ndarray:
    """Blend `patch` onto `background` at `origin` weighted by `mask`.

    Covered pixels become round(alpha*patch + (1-alpha)*background), computed
    in float64 and rounded half-up at the end. Pixels where alpha == 0 are
    bit-identical to the background.
    """
    _check_image(background, "background")
    _check_image(patch, "patch")
    if mask.shape != patch.shape[:2]:
        raise DimensionMismatchError(
            f"mask {mask.shape} does not match patch {patch.shape[:2]}"
        )
    r0, c0 = origin
    ph, pw = patch.shape[:2]
    bh, bw = background.shape[:2]
    if r0 < 0 or c0 < 0 or r0 + ph > bh or c0 + pw > bw:
        raise DimensionMismatchError(
            f"patch {ph}x{pw} at ({r0},{c0}) exceeds background {bh}x{bw}"
        )
    out = background.copy()
    region = out[r0 : r0 + ph, c0 : c0 + pw].astype(np.float64)
    a = mask.astype(np.float64)[..., None]
    blended = a * patch.astype(np.float64) + (1.0 - a) * region
    quantized = np.floor(blended + 0.5).astype(np.uint8)
    covered = mask > 0.0
    region_out = out[r0 : r0 + ph, c0 : c0 + pw]
    region_out[covered] = quantized[covered]
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian kernel with radius ceil(3*sigma)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur_mask(mask: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian-blur an alpha mask with border renormalization.

    Borders divide by the in-bounds weight sum, so constant masks map to
    themselves. sigma <= BLUR_IDENTITY_SIGMA is an identity pass.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if sigma <= BLUR_IDENTITY_SIGMA:
        return mask.astype(np.float64).copy()
    k = gaussian_kernel(sigma)
    m = mask.astype(np.float64)
    num = convolve1d(m, k, axis=0, mode="constant", cval=0.0)
    num = convolve1d(num, k, axis=1, mode="constant", cval=0.0)
    ones = np.ones_like(m)
    den = convolve1d(ones, k, axis=0, mode="constant", cval=0.0)
    den = convolve1d(den, k, axis=1, mode="constant", cval=0.0)
    out = num / den
    return np.clip(out, 0.0, 1.0)


def _channel_cumcounts(values: np.ndarray) -> np.ndarray:
    # Cumulative right-inclusive counts per bin: cum[v] = #(values <= v).
    hist = np.bincount(values.ravel(), minlength=256)
    return np.cumsum(hist.astype(np.int64))


def histogram_match(source: np.ndarray, reference_pixels: np.ndarray) -> np.ndarray:
    """Match `source` colors to the distribution of `reference_pixels`.

    Per channel with 256-bin histograms: each source value v maps to the
    smallest reference value r with CDF_ref(r) >= CDF_src(v). The mapping is
    monotone non-decreasing.
    """
    _check_image(source, "source")
    ref = np.asarray(reference_pixels)
    if ref.size == 0:
        raise ValueError("reference pixel collection is empty")
    ref = ref.reshape(-1, 3)
    out = np.empty_like(source)
    n_src = source.shape[0] * source.shape[1]
    n_ref = ref.shape[0]
    for c in range(3):
        cum_src = _channel_cumcounts(source[..., c])
        cum_ref = _channel_cumcounts(ref[:, c])
        # Smallest r with CDF_ref(r) >= CDF_src(v), compared in exact integer
        # arithmetic: cum_ref[r] * n_src >= cum_src[v] * n_ref. The cumulative
        # counts jump exactly at values present in the reference, so the
        # lookup always lands on a real reference value.
        lut = np.searchsorted(cum_ref * n_src, cum_src * n_ref, side="left")
        lut = np.minimum(lut, 255).astype(np.uint8)
        out[..., c] = lut[source[..., c]]
    return out
