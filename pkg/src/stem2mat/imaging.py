"""Forward simulator: Gaussian-peak projections, blur, shot noise, file I/O.

The physical model is deliberately simple: every projected atom adds an
isotropic Gaussian of amplitude Z**gamma, lens effects collapse into one
Gaussian blur, and the detector injects Poisson noise scaled by electron
dose. Images are stored as raw little-endian float32 plus a JSON sidecar.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .crystal import CrystalStructure, make_supercell, projected_xy
from .errors import EmptyStructure, ExtentTooSmall

RNG_ALGORITHM = "philox4x64"
MIN_EXTENT = 1.6      # A, smallest renderable in-plane cell extent
MIN_DIM_PX = 16


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


@dataclass(frozen=True)
class ImagingConfig:
    """Rendering and noise parameters for one simulated acquisition."""

    pixel_size: float = 0.1        # A/px
    dose: float = 6e4              # e-/A^2
    blur_sigma: float = 0.5        # A
    contrast_exponent: float = 0.7
    peak_sigma: float = 0.4        # A
    rng_seed: int = 0
    expand_supercell: bool = False
    supercell_min: int = 12
    supercell_max: int = 16

    def __post_init__(self):
        if self.pixel_size <= 0:
            raise ValueError("pixel_size must be positive")
        if self.dose <= 0:
            raise ValueError("dose must be positive")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.peak_sigma <= 0:
            raise ValueError("peak_sigma must be positive")


@dataclass(frozen=True, eq=False)
class StemImage:
    """Float intensity grid with physical pixel size and free-form metadata."""

    pixels: np.ndarray
    pixel_size: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.array(self.pixels, dtype=float)
        if p.ndim != 2:
            raise ValueError("pixels must be a 2-D array")
        if p.shape[0] < MIN_DIM_PX or p.shape[1] < MIN_DIM_PX:
            raise ValueError(f"image must be at least {MIN_DIM_PX}px per side")
        if not np.all(np.isfinite(p)) or p.min() < 0:
            raise ValueError("pixel values must be finite and >= 0")
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical (x, y) coordinates of pixel centers, image frame."""
        x = (np.arange(self.width) + 0.5) * self.pixel_size
        y = (np.arange(self.height) + 0.5) * self.pixel_size
        return x, y


class AtomMask(StemImage):
    """Ground-truth mask: unit-amplitude Gaussians at atom centers."""


def _canvas(s: CrystalStructure, cfg: ImagingConfig):
    """Image geometry covering the projected cell bbox plus a 2-sigma margin."""
    if len(s.sites) == 0:
        raise EmptyStructure("cannot render an empty structure")
    a2 = s.lattice.vectors[0, :2]
    b2 = s.lattice.vectors[1, :2]
    corners = np.array([[0.0, 0.0], a2, b2, a2 + b2])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    extent = hi - lo
    if extent[0] < MIN_EXTENT or extent[1] < MIN_EXTENT:
        raise ExtentTooSmall(
            f"projected extent {extent[0]:.2f} x {extent[1]:.2f} A below {MIN_EXTENT} A"
        )
    margin = 2.0 * cfg.peak_sigma
    origin = lo - margin
    width = max(MIN_DIM_PX, int(math.ceil((extent[0] + 2 * margin) / cfg.pixel_size)))
    height = max(MIN_DIM_PX, int(math.ceil((extent[1] + 2 * margin) / cfg.pixel_size)))
    return origin, width, height


def _splat(
    positions: np.ndarray,
    amplitudes: np.ndarray,
    origin: np.ndarray,
    width: int,
    height: int,
    cfg: ImagingConfig,
    combine: str,
) -> np.ndarray:
    """Accumulate Gaussians on the canvas; windows truncate at 4 sigma."""
    ps = cfg.pixel_size
    sigma_px = cfg.peak_sigma / ps
    half = int(math.ceil(4.0 * sigma_px))
    img = np.zeros((height, width))
    px = (positions[:, 0] - origin[0]) / ps - 0.5
    py = (positions[:, 1] - origin[1]) / ps - 0.5
    for cx, cy, amp in zip(px, py, amplitudes):
        ix, iy = int(round(cx)), int(round(cy))
        x0, x1 = max(0, ix - half), min(width, ix + half + 1)
        y0, y1 = max(0, iy - half), min(height, iy + half + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        gx = np.arange(x0, x1) - cx
        gy = np.arange(y0, y1) - cy
        g = amp * np.exp(-(gx[None, :] ** 2 + gy[:, None] ** 2) / (2 * sigma_px**2))
        if combine == "sum":
            img[y0:y1, x0:x1] += g
        else:
            np.maximum(img[y0:y1, x0:x1], g, out=img[y0:y1, x0:x1])
    return img


def render_projection(s: CrystalStructure, cfg: ImagingConfig) -> StemImage:
    """Noise-free ideal projection: Z**gamma Gaussians at projected sites."""
    origin, width, height = _canvas(s, cfg)
    xy = projected_xy(s)
    amps = np.array([site.element.z ** cfg.contrast_exponent for site in s.sites])
    pixels = _splat(xy, amps, origin, width, height, cfg, "sum")
    meta = {
        "origin_x": float(origin[0]),
        "origin_y": float(origin[1]),
        "provenance": "gaussian-projection",
    }
    return StemImage(pixels, cfg.pixel_size, meta)


def render_atom_mask(s: CrystalStructure, cfg: ImagingConfig) -> AtomMask:
    """Unit-amplitude localization mask on the same canvas as the projection."""
    origin, width, height = _canvas(s, cfg)
    xy = projected_xy(s)
    amps = np.ones(len(s.sites))
    pixels = np.minimum(_splat(xy, amps, origin, width, height, cfg, "sum"), 1.0)
    meta = {
        "origin_x": float(origin[0]),
        "origin_y": float(origin[1]),
        "provenance": "atom-mask",
    }
    return AtomMask(pixels, cfg.pixel_size, meta)


def apply_blur(img: StemImage, sigma: float) -> StemImage:
    """Gaussian blur with reflective padding; sigma in angstrom, 0 = identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img
    sigma_px = sigma / img.pixel_size
    blurred = ndimage.gaussian_filter(
        img.pixels, sigma_px, mode="reflect", truncate=4.0
    )
    meta = dict(img.meta)
    meta["blur_sigma"] = float(sigma)
    return StemImage(blurred, img.pixel_size, meta)


def apply_poisson_noise(img: StemImage, dose: float, seed: int) -> StemImage:
    """Sample per-pixel Poisson counts at the dose-implied rate and rescale back.

    The clean image is scaled so that its maximum maps to
    ``dose * pixel_size**2`` expected counts (one detector count per
    electron). Deterministic for a fixed seed.
    """
    if dose <= 0:
        raise ValueError("dose must be positive")
    peak = float(img.pixels.max())
    meta = dict(img.meta)
    meta.update({"dose": float(dose), "seed": int(seed), "rng": RNG_ALGORITHM})
    if peak <= 0:
        return StemImage(img.pixels.copy(), img.pixel_size, meta)
    scale = dose * img.pixel_size**2 / peak
    counts = _rng(seed).poisson(img.pixels * scale)
    return StemImage(counts / scale, img.pixel_size, meta)


def simulate(
    s: CrystalStructure, cfg: ImagingConfig
) -> tuple[StemImage, StemImage, AtomMask]:
    """Full forward pass: (noisy, clean, mask) for one structure.

    With ``expand_supercell`` the unit cell is replicated n x n x 1 with n
    drawn uniformly from the configured range using ``rng_seed``.
    """
    if cfg.expand_supercell:
        n = int(
            _rng(cfg.rng_seed).integers(cfg.supercell_min, cfg.supercell_max + 1)
        )
        s = make_supercell(s, n, n, 1)
    clean = apply_blur(render_projection(s, cfg), cfg.blur_sigma)
    noisy = apply_poisson_noise(clean, cfg.dose, cfg.rng_seed)
    mask = render_atom_mask(s, cfg)
    return noisy, clean, mask


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_raw(img: StemImage, path: str | Path) -> Path:
    """Write raw little-endian float32 pixels plus a JSON sidecar."""
    path = Path(path)
    path.write_bytes(img.pixels.astype("<f4").tobytes(order="C"))
    meta = dict(img.meta)
    sidecar = {
        "width": img.width,
        "height": img.height,
        "pixel_size_angstrom": img.pixel_size,
        "dose": meta.pop("dose", None),
        "seed": meta.pop("seed", None),
        "provenance": meta,
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_raw(path: str | Path) -> StemImage:
    path = Path(path)
    sidecar = json.loads(_sidecar_path(path).read_text())
    pixels = np.frombuffer(path.read_bytes(), dtype="<f4").astype(float)
    pixels = pixels.reshape(sidecar["height"], sidecar["width"])
    meta = dict(sidecar.get("provenance") or {})
    if sidecar.get("dose") is not None:
        meta["dose"] = sidecar["dose"]
    if sidecar.get("seed") is not None:
        meta["seed"] = sidecar["seed"]
    return StemImage(pixels, sidecar["pixel_size_angstrom"], meta)


def export_png(img: StemImage, path: str | Path) -> Path:
    """Min-max scaled 16-bit PNG for visual inspection only."""
    from PIL import Image

    path = Path(path)
    p = img.pixels
    span = p.max() - p.min()
    scaled = (p - p.min()) / span if span > 0 else np.zeros_like(p)
    arr = (scaled * 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(path)
    return path
