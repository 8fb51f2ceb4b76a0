"""Noise-gated denoiser bank.

A robust noise estimate routes each image to one of four classical
experts (passthrough, light Gaussian, median+Gaussian, non-local means).
The gating contract mirrors a mixture-of-experts denoiser, so a learned
expert can replace any entry without touching callers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.restoration import denoise_nl_means

from .config import DenoiseConfig
from .errors import ConstantImage
from .imaging import StemImage

# Consistency factor mapping MAD of the 3x3-median residual to the std of
# iid noise (1.4826 for a Gaussian MAD, adjusted for the variance the
# windowed median removes; calibrated on Poisson fields with lambda >= 100).
_MAD_TO_SIGMA = 1.666

# Pixels whose smoothed intensity falls below this fraction of the maximum
# are treated as empty canvas (skewed cells leave large zero corners) and
# excluded from noise statistics.
_ACTIVE_FRACTION = 0.05


class ExpertKind(enum.Enum):
    PASSTHROUGH = "passthrough"
    GAUSSIAN_LIGHT = "gaussian_light"
    MEDIAN_MODERATE = "median_moderate"
    NLM_HEAVY = "nlm_heavy"


@dataclass(frozen=True)
class NoiseEstimate:
    sigma_rel: float
    method: str = "mad-median-residual"


def estimate_noise_level(img: StemImage) -> NoiseEstimate:
    """Relative noise level from the high-frequency residual.

    sigma_rel = scaled MAD of (image - 3x3 median filter), normalized by
    the median intensity. Raises ConstantImage on zero dynamic range.
    """
    p = img.pixels
    lo, hi = float(p.min()), float(p.max())
    if hi - lo <= 0:
        raise ConstantImage("image has zero dynamic range")
    smooth = ndimage.median_filter(p, size=3, mode="reflect")
    active = smooth > _ACTIVE_FRACTION * float(smooth.max())
    if active.sum() < 64:
        active = np.ones_like(active)
    residual = (p - smooth)[active]
    mad = float(np.median(np.abs(residual - np.median(residual))))
    # guard against near-zero medians on sparse images (mostly background)
    denom = max(float(np.median(p[active])), 1e-3 * hi)
    return NoiseEstimate(sigma_rel=_MAD_TO_SIGMA * mad / denom)


def select_expert(
    est: NoiseEstimate, cfg: DenoiseConfig | None = None
) -> ExpertKind:
    """Threshold lookup over half-open sigma_rel intervals."""
    cfg = cfg or DenoiseConfig()
    s = est.sigma_rel
    if s < cfg.passthrough_below:
        return ExpertKind.PASSTHROUGH
    if s < cfg.light_below:
        return ExpertKind.GAUSSIAN_LIGHT
    if s < cfg.moderate_below:
        return ExpertKind.MEDIAN_MODERATE
    return ExpertKind.NLM_HEAVY


def _run_expert(
    kind: ExpertKind, pixels: np.ndarray, sigma_rel: float, cfg: DenoiseConfig
) -> np.ndarray:
    if kind is ExpertKind.PASSTHROUGH:
        return pixels
    if kind is ExpertKind.GAUSSIAN_LIGHT:
        return ndimage.gaussian_filter(pixels, cfg.gaussian_sigma_px, mode="reflect")
    if kind is ExpertKind.MEDIAN_MODERATE:
        med = ndimage.median_filter(pixels, size=cfg.median_size_px, mode="reflect")
        return ndimage.gaussian_filter(med, cfg.gaussian_sigma_px, mode="reflect")
    h = cfg.nlm_h_factor * sigma_rel * max(float(np.median(pixels)), 1e-12)
    return denoise_nl_means(
        pixels,
        patch_size=cfg.nlm_patch_size,
        patch_distance=cfg.nlm_patch_distance,
        h=h,
        fast_mode=True,
    )


def denoise_image(
    img: StemImage,
    cfg: DenoiseConfig | None = None,
    force_expert: ExpertKind | None = None,
) -> tuple[StemImage, ExpertKind]:
    """Denoise with the gated expert; output is rescaled to the input max.

    Never increases the estimated noise level. ``force_expert`` bypasses
    the gate (used by the orchestrator's retry schedule).
    """
    cfg = cfg or DenoiseConfig()
    est = estimate_noise_level(img)
    kind = force_expert or select_expert(est, cfg)
    if kind is ExpertKind.PASSTHROUGH:
        return img, kind
    out = _run_expert(kind, img.pixels, est.sigma_rel, cfg)
    out = np.clip(out, 0.0, None)
    # keep intensities inside [0, original max]; experts only ever shrink
    # the peak, so this renormalizes without stretching noise spikes
    peak = float(out.max())
    limit = float(img.pixels.max())
    if peak > limit > 0:
        out = out * (limit / peak)
    meta = dict(img.meta)
    meta["denoise_expert"] = kind.value
    return StemImage(out, img.pixel_size, meta), kind


HEAVIER_ORDER = (
    ExpertKind.PASSTHROUGH,
    ExpertKind.GAUSSIAN_LIGHT,
    ExpertKind.MEDIAN_MODERATE,
    ExpertKind.NLM_HEAVY,
)


def heavier_expert(kind: ExpertKind, steps: int = 1) -> ExpertKind:
    """The expert ``steps`` places up the aggressiveness ladder."""
    idx = min(HEAVIER_ORDER.index(kind) + steps, len(HEAVIER_ORDER) - 1)
    return HEAVIER_ORDER[idx]
