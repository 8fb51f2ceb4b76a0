"""Template library: build rendered projections from a CIF corpus and
retrieve candidates for a query image.

Scoring is zero-mean normalized cross-correlation maximized over a
rotation/scale grid and all translations. Correlation runs at a reduced
working resolution via FFT with integral-image normalization, so a
100-template library scores in about a second per query. An elemental
contrast signature (1-3 normalized intensity levels) filters candidates
before the pixel score ranks them.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.fft import irfft2, next_fast_len, rfft2

from .cluster import kmeans
from .config import PeakConfig, RetrievalConfig
from .crystal import CrystalStructure, make_supercell, parse_cif, write_cif
from .elements import Element
from .errors import EmptyLibrary, NoPeaks
from .imaging import ImagingConfig, StemImage, apply_blur, load_raw, render_projection, save_raw
from .reconstruct import detect_peaks

LIBRARY_MANIFEST = "manifest.json"


@dataclass(frozen=True)
class ContrastSignature:
    """Normalized peak-intensity levels, brightest first (= 1.0)."""

    levels: tuple[float, ...]

    def __post_init__(self):
        if not self.levels or abs(self.levels[0] - 1.0) > 1e-9:
            raise ValueError("signature levels must start at 1.0")
        if any(b >= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("signature levels must strictly decrease")

    @property
    def count(self) -> int:
        return len(self.levels)


@dataclass(eq=False)
class Template:
    """Library entry: canonical clean rendering plus contrast signature."""

    structure_id: str
    unit_projection: StemImage
    signature: ContrastSignature
    element_set: frozenset[Element]
    structure: CrystalStructure
    rotation_period_deg: float = 180.0  # self-symmetry folds the search grid


@dataclass(frozen=True)
class MatchScore:
    structure_id: str
    zncc: float
    rotation: float
    scale: float
    signature_ok: bool


def zncc(a: np.ndarray, b: np.ndarray) -> float:
    """Zero-mean normalized cross-correlation of two equal-shape images."""
    x = np.asarray(a, dtype=float).ravel()
    y = np.asarray(b, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError("zncc requires equal shapes")
    x = x - x.mean()
    y = y - y.mean()
    denom = math.sqrt(float(x @ x) * float(y @ y))
    if denom == 0:
        return 0.0
    return float(np.clip((x @ y) / denom, -1.0, 1.0))


# ---------------------------------------------------------------------------
# Contrast signatures
# ---------------------------------------------------------------------------

def signature_from_intensities(
    intensities: np.ndarray, cfg: RetrievalConfig | None = None
) -> ContrastSignature:
    """Cluster peak intensities into 1-3 levels.

    The level count grows while each extra level is well separated
    (adjacent centers at least ``min_level_separation`` apart after
    normalization) and removes most of the remaining spread.
    """
    cfg = cfg or RetrievalConfig()
    vals = np.asarray(intensities, dtype=float)
    vals = vals / vals.max()
    best_levels = (1.0,)
    _, _, prev_sse = kmeans(vals[:, None], 1)
    for k in (2, 3):
        if len(vals) < k:
            break
        centers, _, sse = kmeans(vals[:, None], k)
        centers = centers[:, 0]
        if np.diff(centers).min() < cfg.min_level_separation:
            break
        if prev_sse > 0 and sse > cfg.level_sse_drop * prev_sse:
            break
        best_levels = tuple(sorted((centers / centers.max()).tolist(), reverse=True))
        best_levels = (1.0,) + best_levels[1:]
        prev_sse = sse
    return ContrastSignature(best_levels)


def contrast_signature(
    img: StemImage,
    peak_sigma: float = 0.4,
    cfg: RetrievalConfig | None = None,
    peak_cfg: PeakConfig | None = None,
) -> ContrastSignature:
    """Signature of an image via peak detection (raises NoPeaks if blank)."""
    peaks = detect_peaks(img, peak_sigma=peak_sigma, cfg=peak_cfg)
    return signature_from_intensities(peaks.intensities, cfg)


def signatures_compatible(
    a: ContrastSignature, b: ContrastSignature, tolerance: float
) -> bool:
    if a.count != b.count:
        return False
    return all(abs(x - y) < tolerance for x, y in zip(a.levels, b.levels))


# ---------------------------------------------------------------------------
# Library build / persistence
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TemplateLibrary:
    templates: list[Template]
    imaging: ImagingConfig
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    _patch_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.templates.sort(key=lambda t: t.structure_id)

    def __len__(self) -> int:
        return len(self.templates)

    def get(self, structure_id: str) -> Template:
        for t in self.templates:
            if t.structure_id == structure_id:
                return t
        raise KeyError(structure_id)


def render_template(
    s: CrystalStructure, cfg: ImagingConfig, supercell: int = 4
) -> StemImage:
    """Canonical noise-free rendering used for both library and matching."""
    sc = make_supercell(s, supercell, supercell, 1)
    return apply_blur(render_projection(sc, cfg), cfg.blur_sigma)


def build_library(
    cif_dir: str | Path,
    cfg: ImagingConfig,
    retrieval_cfg: RetrievalConfig | None = None,
) -> TemplateLibrary:
    """One template per parseable CIF in the directory (sorted by filename)."""
    retrieval_cfg = retrieval_cfg or RetrievalConfig()
    cif_dir = Path(cif_dir)
    templates: list[Template] = []
    skipped: list[tuple[str, str]] = []
    for path in sorted(cif_dir.glob("*.cif")):
        sid = path.stem
        try:
            struct = parse_cif(path.read_text())
            proj = render_template(struct, cfg, retrieval_cfg.template_supercell)
            sig = contrast_signature(proj, peak_sigma=cfg.peak_sigma, cfg=retrieval_cfg)
            period = rotation_period(
                _match_pixels(proj, retrieval_cfg), retrieval_cfg.rotation_step_deg
            )
            templates.append(
                Template(
                    structure_id=sid,
                    unit_projection=proj,
                    signature=sig,
                    element_set=frozenset(struct.elements),
                    structure=struct,
                    rotation_period_deg=period,
                )
            )
        except Exception as exc:  # noqa: BLE001 - skip-and-warn contract
            warnings.warn(f"skipping {path.name}: {exc}", stacklevel=2)
            skipped.append((sid, str(exc)))
    if not templates:
        raise EmptyLibrary(f"no usable CIFs in {cif_dir}")
    return TemplateLibrary(templates, cfg, retrieval_cfg, skipped)


def save_library(lib: TemplateLibrary, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for t in lib.templates:
        img_name = f"{t.structure_id}.raw"
        cif_name = f"{t.structure_id}.cif"
        save_raw(t.unit_projection, out_dir / img_name)
        (out_dir / cif_name).write_text(write_cif(t.structure))
        entries.append(
            {
                "id": t.structure_id,
                "image": img_name,
                "cif": cif_name,
                "signature": list(t.signature.levels),
                "elements": sorted(e.symbol for e in t.element_set),
                "rotation_period_deg": t.rotation_period_deg,
            }
        )
    manifest = {
        "version": 1,
        "imaging": {
            "pixel_size": lib.imaging.pixel_size,
            "blur_sigma": lib.imaging.blur_sigma,
            "peak_sigma": lib.imaging.peak_sigma,
            "contrast_exponent": lib.imaging.contrast_exponent,
        },
        "templates": entries,
    }
    (out_dir / LIBRARY_MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )
    return out_dir / LIBRARY_MANIFEST


def load_library(
    lib_dir: str | Path, retrieval_cfg: RetrievalConfig | None = None
) -> TemplateLibrary:
    lib_dir = Path(lib_dir)
    manifest = json.loads((lib_dir / LIBRARY_MANIFEST).read_text())
    imaging = ImagingConfig(
        pixel_size=manifest["imaging"]["pixel_size"],
        blur_sigma=manifest["imaging"]["blur_sigma"],
        peak_sigma=manifest["imaging"]["peak_sigma"],
        contrast_exponent=manifest["imaging"]["contrast_exponent"],
    )
    templates = []
    for entry in manifest["templates"]:
        struct = parse_cif((lib_dir / entry["cif"]).read_text())
        templates.append(
            Template(
                structure_id=entry["id"],
                unit_projection=load_raw(lib_dir / entry["image"]),
                signature=ContrastSignature(tuple(entry["signature"])),
                element_set=frozenset(struct.elements),
                structure=struct,
                rotation_period_deg=entry.get("rotation_period_deg", 180.0),
            )
        )
    if not templates:
        raise EmptyLibrary(f"empty manifest in {lib_dir}")
    return TemplateLibrary(templates, imaging, retrieval_cfg or RetrievalConfig())


# ---------------------------------------------------------------------------
# Pose-searched normalized cross-correlation
# ---------------------------------------------------------------------------

def _resample(pixels: np.ndarray, zoom: float) -> np.ndarray:
    if abs(zoom - 1.0) < 1e-12:
        return pixels
    return ndimage.zoom(pixels, zoom, order=1, mode="nearest")


def _pose_patch(
    template_pixels: np.ndarray, rotation_deg: float, scale: float
) -> np.ndarray:
    """Rotate/scale the template and crop the largest always-valid center."""
    rotated = (
        template_pixels
        if rotation_deg == 0.0
        else ndimage.rotate(
            template_pixels, rotation_deg, reshape=False, order=1, mode="constant"
        )
    )
    scaled = _resample(rotated, scale)
    h, w = scaled.shape
    side = int(min(h, w) / math.sqrt(2.0))
    cy, cx = h // 2, w // 2
    half = max(side // 2, 4)
    return scaled[cy - half : cy + half, cx - half : cx + half]


def ncc_max(query: np.ndarray, patch: np.ndarray) -> float:
    """Max ZNCC of ``patch`` against every translation inside ``query``."""
    return _CropContext(query).score(patch)


def rotation_period(pixels: np.ndarray, step_deg: float) -> float:
    """Smallest grid rotation under which the image matches itself.

    A square template repeats every 90 degrees and a hexagonal one every
    60, so the pose search only needs rotations below that period.
    """
    ctx = _CropContext(pixels)
    n = int(round(180.0 / step_deg))
    for i in range(1, n):
        ang = i * step_deg
        rotated = _pose_patch(pixels, ang, 1.0)
        if ctx.score(rotated) > 0.995:
            return ang
    return 180.0


class _CropContext:
    """FFT and integral images of one query window, reused across patches."""

    def __init__(self, pixels: np.ndarray, pad_to: int | None = None):
        self.q = np.asarray(pixels, dtype=float)
        qh, qw = self.q.shape
        pad = pad_to or max(qh, qw)
        self.shape = (next_fast_len(qh + pad - 1), next_fast_len(qw + pad - 1))
        self.qf = rfft2(self.q, self.shape)
        ii = np.zeros((qh + 1, qw + 1))
        np.cumsum(np.cumsum(self.q, axis=0), axis=1, out=ii[1:, 1:])
        ii2 = np.zeros((qh + 1, qw + 1))
        np.cumsum(np.cumsum(self.q * self.q, axis=0), axis=1, out=ii2[1:, 1:])
        self.ii, self.ii2 = ii, ii2
        self._denom_cache: dict[tuple[int, int], np.ndarray] = {}

    def _denom_base(self, ph: int, pw: int) -> np.ndarray:
        key = (ph, pw)
        if key not in self._denom_cache:
            ii, ii2 = self.ii, self.ii2
            s1 = ii[ph:, pw:] - ii[:-ph, pw:] - ii[ph:, :-pw] + ii[:-ph, :-pw]
            s2 = ii2[ph:, pw:] - ii2[:-ph, pw:] - ii2[ph:, :-pw] + ii2[:-ph, :-pw]
            var = np.clip(s2 - s1 * s1 / (ph * pw), 0.0, None)
            self._denom_cache[key] = np.sqrt(var)
        return self._denom_cache[key]

    def score(self, patch: np.ndarray) -> float:
        qh, qw = self.q.shape
        ph, pw = patch.shape
        if ph > qh or pw > qw:
            ch, cw = min(ph, qh), min(pw, qw)
            y0, x0 = (ph - ch) // 2, (pw - cw) // 2
            patch = patch[y0 : y0 + ch, x0 : x0 + cw]
            ph, pw = patch.shape
        pz = patch - patch.mean()
        pnorm = math.sqrt(float((pz * pz).sum()))
        if pnorm == 0:
            return 0.0
        pf = rfft2(pz[::-1, ::-1], self.shape)
        full = irfft2(self.qf * pf, self.shape)
        corr = full[ph - 1 : qh, pw - 1 : qw]
        denom = self._denom_base(ph, pw) * pnorm
        with np.errstate(divide="ignore", invalid="ignore"):
            scores = np.where(denom > 1e-12 * pnorm, corr / denom, 0.0)
        return float(np.clip(scores.max(), -1.0, 1.0))


# the query repeats every lattice period, so a window this many times the
# patch side sees every distinct patch-to-lattice alignment
_CROP_FACTOR = 1.75


class _QueryContext:
    """Centered crops of one resampled query, keyed by window size."""

    def __init__(self, pixels: np.ndarray):
        self.pixels = np.asarray(pixels, dtype=float)
        self._crops: dict[int, _CropContext] = {}

    def crop(self, patch_side: int) -> _CropContext:
        qh, qw = self.pixels.shape
        side = int(math.ceil(_CROP_FACTOR * patch_side))
        side = min(side, qh, qw)
        if side not in self._crops:
            cy, cx = qh // 2, qw // 2
            half = side // 2
            window = self.pixels[
                max(0, cy - half) : cy - half + side,
                max(0, cx - half) : cx - half + side,
            ]
            self._crops[side] = _CropContext(window)
        return self._crops[side]

    def score(self, patch: np.ndarray) -> float:
        return self.crop(max(patch.shape)).score(patch)


def _rotation_grid(cfg: RetrievalConfig, period_deg: float = 180.0) -> list[float]:
    n = int(round(180.0 / cfg.rotation_step_deg))
    grid = [i * cfg.rotation_step_deg for i in range(n)]
    return [r for r in grid if r < period_deg - 1e-9]


def _match_pixels(img: StemImage, cfg: RetrievalConfig) -> np.ndarray:
    return _resample(img.pixels, img.pixel_size / cfg.match_pixel_size)


def _template_patches(tmpl: Template, cfg: RetrievalConfig, cache: dict | None = None):
    key = (tmpl.structure_id, cfg.match_pixel_size, cfg.rotation_step_deg, cfg.scales)
    if cache is not None and key in cache:
        return cache[key]
    base = _match_pixels(tmpl.unit_projection, cfg)
    patches = {
        (rot, scale): _pose_patch(base, rot, scale)
        for rot in _rotation_grid(cfg, tmpl.rotation_period_deg)
        for scale in cfg.scales
    }
    if cache is not None:
        cache[key] = patches
    return patches


def _max_patch_side(lib: TemplateLibrary, cfg: RetrievalConfig) -> int:
    side = 8
    for t in lib.templates:
        h, w = t.unit_projection.pixels.shape
        zoom = t.unit_projection.pixel_size / cfg.match_pixel_size
        est = int(min(h, w) * zoom / math.sqrt(2.0)) + 2
        side = max(side, est)
    return side


def score_match(
    query: StemImage,
    tmpl: Template,
    cfg: RetrievalConfig | None = None,
    lib: TemplateLibrary | None = None,
    query_ctx: "_QueryContext | None" = None,
    query_signature: ContrastSignature | None = None,
    peak_sigma: float = 0.4,
) -> MatchScore:
    """Best ZNCC over the rotation and scale grids, plus the signature gate."""
    cfg = cfg or (lib.retrieval if lib is not None else RetrievalConfig())
    cache = lib._patch_cache if lib is not None else None
    patches = _template_patches(tmpl, cfg, cache)
    if query_ctx is None:
        max_side = max(max(p.shape) for p in patches.values())
        query_ctx = _QueryContext(_match_pixels(query, cfg), max_side)
    if query_signature is None:
        try:
            query_signature = contrast_signature(query, peak_sigma=peak_sigma, cfg=cfg)
        except NoPeaks:
            query_signature = None
    best = (-2.0, 0.0, 1.0)
    for (rot, scale), patch in patches.items():
        score = query_ctx.score(patch)
        if score > best[0]:
            best = (score, rot, scale)
    sig_ok = query_signature is not None and signatures_compatible(
        query_signature, tmpl.signature, cfg.signature_tolerance
    )
    return MatchScore(
        structure_id=tmpl.structure_id,
        zncc=best[0],
        rotation=best[1],
        scale=best[2],
        signature_ok=bool(sig_ok),
    )


def retrieve_top_k(
    query: StemImage,
    lib: TemplateLibrary,
    k: int,
    cfg: RetrievalConfig | None = None,
    peak_sigma: float = 0.4,
) -> list[MatchScore]:
    """Rank templates: signature-passing candidates first, then backfill.

    Ordering inside each group is by ZNCC descending with a stable
    structure-id tie break; deterministic for fixed inputs.
    """
    if len(lib) == 0:
        raise EmptyLibrary("cannot retrieve from an empty library")
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = cfg or lib.retrieval
    ctx = _QueryContext(_match_pixels(query, cfg), _max_patch_side(lib, cfg))
    try:
        query_signature = contrast_signature(query, peak_sigma=peak_sigma, cfg=cfg)
    except NoPeaks:
        query_signature = None
    scores = [
        score_match(
            query,
            t,
            cfg,
            lib=lib,
            query_ctx=ctx,
            query_signature=query_signature,
        )
        for t in lib.templates
    ]
    passing = sorted(
        (s for s in scores if s.signature_ok),
        key=lambda s: (-s.zncc, s.structure_id),
    )
    backfill = sorted(
        (s for s in scores if not s.signature_ok),
        key=lambda s: (-s.zncc, s.structure_id),
    )
    return (passing + backfill)[:k]
