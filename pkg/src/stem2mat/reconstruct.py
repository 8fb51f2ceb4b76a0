"""Image to crystal: peak detection, lattice fitting, species assignment,
and reduction to the minimal repeating unit.

The lattice fitter clusters peak-to-neighbor difference vectors, screens
candidate vector pairs by how well they translate the whole pattern onto
itself (which rejects bond vectors and vacancy sublattices), then refines
vectors, origin, and motif offsets by alternating integer assignment with
a linear least-squares solve. Near-symmetric fits snap to hexagonal,
square, or rectangular classes and are re-refined under that constraint.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.filters import threshold_otsu

from .config import LatticeConfig, PeakConfig, SpeciesConfig
from .crystal import CrystalStructure, Lattice, Site, fold_frac
from .elements import Element
from .errors import (
    ClusterCollapse,
    DegenerateLattice,
    MotifInconsistent,
    NoPeaks,
    NoTemplateZ,
    PoorFit,
    SaturatedImage,
    TooFewPeaks,
)
from .imaging import StemImage
from .cluster import kmeans


@dataclass(frozen=True)
class Peak:
    x: float
    y: float
    intensity: float


@dataclass(frozen=True, eq=False)
class PeakSet:
    """Detected atomic-column positions (angstrom, image frame)."""

    positions: np.ndarray      # (N, 2)
    intensities: np.ndarray    # (N,)
    image_ref: str = ""

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 2)
        inten = np.array(self.intensities, dtype=float).reshape(-1)
        pos.setflags(write=False)
        inten.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "intensities", inten)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def peaks(self) -> list[Peak]:
        return [
            Peak(float(x), float(y), float(v))
            for (x, y), v in zip(self.positions, self.intensities)
        ]


class LatticeSymmetry(enum.Enum):
    HEXAGONAL = "hexagonal"
    SQUARE = "square"
    RECTANGULAR = "rectangular"
    OBLIQUE = "oblique"


@dataclass(frozen=True, eq=False)
class LatticeFit:
    a_vec: np.ndarray
    b_vec: np.ndarray
    origin: np.ndarray
    residual_rms: float
    symmetry: LatticeSymmetry

    def __post_init__(self):
        for name in ("a_vec", "b_vec", "origin"):
            v = np.array(getattr(self, name), dtype=float).reshape(2)
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def matrix(self) -> np.ndarray:
        """Row matrix [a; b]; fractional = (p - origin) @ inv(matrix)."""
        return np.array([self.a_vec, self.b_vec])


@dataclass(frozen=True)
class ReconstructionResult:
    structure: CrystalStructure
    fit: LatticeFit
    peaks_used: int
    peaks_rejected: int
    species_confidence: float


# ---------------------------------------------------------------------------
# Peak detection
# ---------------------------------------------------------------------------

def detect_peaks(
    img: StemImage,
    peak_sigma: float = 0.4,
    cfg: PeakConfig | None = None,
) -> PeakSet:
    """Locate atomic columns: adaptive threshold, local-maximum clusters,
    intensity-weighted sub-pixel centroids.

    Pixels above the Otsu threshold are grouped around local maxima (merged
    components with several well-separated maxima split apart). Clusters
    smaller than a disc of radius ``peak_sigma / 2`` are discarded, peaks
    closer than the minimum separation merge into the brighter one, and
    centroids within two peak widths of the border are dropped as clipped.
    """
    cfg = cfg or PeakConfig()
    p = img.pixels
    ps = img.pixel_size
    if p.max() - p.min() <= 0:
        raise NoPeaks("constant image")
    thresh = float(threshold_otsu(p))
    above = p > thresh
    frac_above = float(above.mean())
    if frac_above > cfg.saturation_fraction:
        raise SaturatedImage(
            f"{100 * frac_above:.0f}% of pixels above threshold; denoising failed"
        )
    if not above.any():
        raise NoPeaks("nothing above threshold")

    sep_px = max(3, int(round(cfg.min_separation / ps)) | 1)
    is_max = (ndimage.maximum_filter(p, size=sep_px, mode="reflect") == p) & above
    my, mx = np.nonzero(is_max)
    if len(mx) == 0:
        raise NoPeaks("no local maxima above threshold")

    # assign every above-threshold pixel to its nearest local maximum
    ay, ax = np.nonzero(above)
    tree = cKDTree(np.column_stack([mx, my]))
    _, owner = tree.query(np.column_stack([ax, ay]))
    weights = p[ay, ax]

    n_clusters = len(mx)
    area = np.bincount(owner, minlength=n_clusters)
    wsum = np.bincount(owner, weights=weights, minlength=n_clusters)
    cx = np.bincount(owner, weights=weights * ax, minlength=n_clusters) / wsum
    cy = np.bincount(owner, weights=weights * ay, minlength=n_clusters) / wsum
    peak_val = np.array(
        [p[my[i], mx[i]] for i in range(n_clusters)]
    )

    min_area = max(1, int(math.pi * (cfg.min_area_radius_factor * peak_sigma / ps) ** 2))
    keep = area >= min_area
    cx, cy, peak_val = cx[keep], cy[keep], peak_val[keep]
    if len(cx) == 0:
        raise NoPeaks("all clusters below minimum area")

    pos = np.column_stack([(cx + 0.5) * ps, (cy + 0.5) * ps])

    # merge near-coincident peaks into the brighter one
    order = np.argsort(-peak_val, kind="stable")
    kept: list[int] = []
    kept_tree_pts: list[np.ndarray] = []
    for idx in order:
        q = pos[idx]
        ok = all(np.hypot(*(q - pos[j])) >= cfg.min_separation for j in kept)
        if ok:
            kept.append(idx)
    kept.sort()
    pos, peak_val = pos[kept], peak_val[kept]

    # drop clipped columns near the border
    margin = cfg.border_margin_factor * peak_sigma - ps
    w_a, h_a = img.width * ps, img.height * ps
    inside = (
        (pos[:, 0] >= margin)
        & (pos[:, 0] <= w_a - margin)
        & (pos[:, 1] >= margin)
        & (pos[:, 1] <= h_a - margin)
    )
    pos, peak_val = pos[inside], peak_val[inside]
    if len(pos) == 0:
        raise NoPeaks("all peaks inside the border margin")
    return PeakSet(pos, peak_val, image_ref=str(img.meta.get("provenance", "")))


# ---------------------------------------------------------------------------
# Lattice fitting
# ---------------------------------------------------------------------------

def _difference_clusters(pos: np.ndarray, cfg: LatticeConfig):
    """Cluster neighbor difference vectors; returns (centers, counts)."""
    n = len(pos)
    k = min(cfg.neighbor_count + 1, n)
    tree = cKDTree(pos)
    dists, idx = tree.query(pos, k=k)
    centers: list[np.ndarray] = []
    sums: list[np.ndarray] = []
    counts: list[int] = []
    r2 = cfg.diff_cluster_radius**2
    for i in range(n):
        for j_pos in range(1, k):
            j = idx[i, j_pos]
            if j == i or j >= n:
                continue
            d = pos[j] - pos[i]
            placed = False
            for c_i, c in enumerate(centers):
                dd = d - c
                if dd[0] * dd[0] + dd[1] * dd[1] < r2:
                    sums[c_i] += d
                    counts[c_i] += 1
                    centers[c_i] = sums[c_i] / counts[c_i]
                    placed = True
                    break
            if not placed:
                centers.append(d.copy())
                sums.append(d.copy())
                counts.append(1)
    return np.array(centers), np.array(counts)


def _translation_support(pos: np.ndarray, tree: cKDTree, v: np.ndarray, tol: float) -> float:
    """Fraction of peaks whose translate by v lands on another peak."""
    targets = pos + v
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    eligible = np.all((targets >= lo) & (targets <= hi), axis=1)
    n_eligible = int(eligible.sum())
    if n_eligible < max(3, len(pos) // 4):
        return 0.0
    d, _ = tree.query(targets[eligible])
    return float(np.mean(d <= tol))


def _wrap_frac(f: np.ndarray) -> np.ndarray:
    return f - np.floor(f)


def _torus_cluster(frac: np.ndarray, mat: np.ndarray, radius: float):
    """Greedy clustering of fractional 2-D points under the torus metric.

    Returns (labels, centers_frac). ``mat`` maps fractional to Cartesian.
    """
    labels = np.full(len(frac), -1, dtype=int)
    reps: list[np.ndarray] = []    # representative (first member, unwrapped frame)
    sums: list[np.ndarray] = []
    counts: list[int] = []
    for i, f in enumerate(frac):
        best = -1
        for c_i, rep in enumerate(reps):
            d = f - (sums[c_i] / counts[c_i])
            d -= np.round(d)
            cart = d @ mat
            if cart @ cart < radius * radius:
                best = c_i
                break
        if best < 0:
            reps.append(f.copy())
            sums.append(f.copy())
            counts.append(1)
            labels[i] = len(reps) - 1
        else:
            # accumulate in the cluster's unwrapped frame
            d = f - reps[best]
            d -= np.round(d)
            sums[best] += reps[best] + d
            counts[best] += 1
            labels[i] = best
    centers = np.array([_wrap_frac(s / c) for s, c in zip(sums, counts)])
    return labels, centers


def _assign_and_solve(pos, mat, origin, motif_frac, constraint=None, theta=None):
    """One half-iteration: integer/motif assignment then linear solve.

    constraint: None (free vectors), ('rot', angle_deg) locking b = R(angle) a,
    or ('rect', theta) locking orthogonal vectors at orientation theta.
    Returns (origin, mat, motif_frac, labels, residual_rms).
    """
    n = len(pos)
    inv = np.linalg.inv(mat)
    f = (pos - origin) @ inv
    if len(motif_frac) == 0:
        motif_frac = np.zeros((1, 2))
    # nearest motif offset on the torus
    d = f[:, None, :] - motif_frac[None, :, :]
    d -= np.round(d)
    cart = np.einsum("nkj,ji->nki", d, mat)
    labels = np.argmin((cart**2).sum(axis=2), axis=1)
    nm = np.round(f - motif_frac[labels])

    k = len(motif_frac)
    if constraint is None:
        # unknowns per axis: origin, a, b, motif cartesian offsets (k-1)
        cols = [np.ones(n), nm[:, 0], nm[:, 1]]
        for j in range(1, k):
            cols.append((labels == j).astype(float))
        a_mat = np.column_stack(cols)
        sol, _, rank, _ = np.linalg.lstsq(a_mat, pos, rcond=None)
        if rank < a_mat.shape[1]:
            return None
        origin_new = sol[0]
        mat_new = sol[1:3]
        model = a_mat @ sol
    else:
        kind, val = constraint
        rows = []
        rhs = []
        if kind == "rot":
            ang = math.radians(val)
            c, s = math.cos(ang), math.sin(ang)
            # p = origin + d_k + (n I + m R) a
            for i in range(n):
                nn, mm = nm[i]
                base_x = [1.0, 0.0, nn + mm * c, -mm * s]
                base_y = [0.0, 1.0, mm * s, nn + mm * c]
                hot_x = [0.0] * (2 * (k - 1))
                hot_y = [0.0] * (2 * (k - 1))
                if labels[i] > 0:
                    hot_x[2 * (labels[i] - 1)] = 1.0
                    hot_y[2 * (labels[i] - 1) + 1] = 1.0
                rows.append(base_x + hot_x)
                rows.append(base_y + hot_y)
                rhs.extend(pos[i])
            a_mat = np.array(rows)
            sol, _, rank, _ = np.linalg.lstsq(a_mat, np.array(rhs), rcond=None)
            if rank < a_mat.shape[1]:
                return None
            origin_new = sol[0:2]
            a_new = sol[2:4]
            r_mat = np.array([[c, -s], [s, c]])
            mat_new = np.array([a_new, r_mat @ a_new])
            model = (a_mat @ sol).reshape(n, 2)
        elif kind == "rect":
            th = val
            c, s = math.cos(th), math.sin(th)
            # a = La (c, s); b = Lb (-s, c)
            for i in range(n):
                nn, mm = nm[i]
                base_x = [1.0, 0.0, nn * c, -mm * s]
                base_y = [0.0, 1.0, nn * s, mm * c]
                hot_x = [0.0] * (2 * (k - 1))
                hot_y = [0.0] * (2 * (k - 1))
                if labels[i] > 0:
                    hot_x[2 * (labels[i] - 1)] = 1.0
                    hot_y[2 * (labels[i] - 1) + 1] = 1.0
                rows.append(base_x + hot_x)
                rows.append(base_y + hot_y)
                rhs.extend(pos[i])
            a_mat = np.array(rows)
            sol, _, rank, _ = np.linalg.lstsq(a_mat, np.array(rhs), rcond=None)
            if rank < a_mat.shape[1]:
                return None
            origin_new = sol[0:2]
            la, lb = sol[2], sol[3]
            mat_new = np.array([[la * c, la * s], [-lb * s, lb * c]])
            model = (a_mat @ sol).reshape(n, 2)
        else:  # pragma: no cover
            raise ValueError(kind)

    resid = pos - model
    rms = float(np.sqrt(np.mean((resid**2).sum(axis=1))))

    # re-derive fractional motif centers from the solved model
    inv_new = np.linalg.inv(mat_new)
    f_new = (pos - origin_new) @ inv_new
    phi = _wrap_frac(f_new - nm)  # frac offset per peak relative to its cell
    motif_new = np.zeros((k, 2))
    for j in range(k):
        member = labels == j
        if member.any():
            ref = phi[member][0]
            d = phi[member] - ref
            d -= np.round(d)
            motif_new[j] = _wrap_frac(ref + d.mean(axis=0))
        else:
            motif_new[j] = motif_frac[j]
    return origin_new, mat_new, motif_new, labels, rms


def _refine(pos, va, vb, cfg: LatticeConfig, constraint=None):
    """Alternate assignment and solve until the residual stops moving."""
    mat = np.array([va, vb], dtype=float)
    origin = pos[0].copy()
    radius = cfg.motif_merge_frac * min(np.linalg.norm(va), np.linalg.norm(vb))
    f = _wrap_frac((pos - origin) @ np.linalg.inv(mat))
    _, motif = _torus_cluster(f, mat, radius)
    if len(motif) > max(1, len(pos) // 3):
        return None
    prev = math.inf
    state = None
    for _ in range(cfg.refine_max_iter):
        out = _assign_and_solve(pos, mat, origin, motif, constraint=constraint)
        if out is None:
            return None
        origin, mat, motif, labels, rms = out
        state = (origin, mat, motif, labels, rms)
        if abs(prev - rms) < cfg.refine_tol:
            break
        prev = rms
    return state


def _gauss_reduce(va: np.ndarray, vb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shortest-vector (Lagrange-reduced) basis with positive orientation."""
    a, b = va.astype(float).copy(), vb.astype(float).copy()
    for _ in range(64):
        if a @ a > b @ b:
            a, b = b, -a
        mu = round(float((a @ b) / (a @ a)))
        if mu == 0:
            break
        b = b - mu * a
    if np.cross(a, b) < 0:
        b = -b
    return a, b


def _pair_angle(va, vb) -> float:
    cosv = np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb))
    return math.degrees(math.acos(np.clip(cosv, -1.0, 1.0)))


def _signed_angle(va, vb) -> float:
    return math.degrees(
        math.atan2(np.cross(va, vb), np.dot(va, vb))
    )


def fit_lattice(ps: PeakSet, cfg: LatticeConfig | None = None) -> LatticeFit:
    """Fit 2-D lattice vectors (with a multi-point motif) to detected peaks."""
    cfg = cfg or LatticeConfig()
    pos = ps.positions
    if len(pos) < 6:
        raise TooFewPeaks(f"{len(pos)} peaks; need at least 6")

    centers, counts = _difference_clusters(pos, cfg)
    lengths = np.linalg.norm(centers, axis=1)
    good = (lengths >= cfg.min_vector_length) & (
        counts >= max(3, int(0.25 * counts.max()))
    )
    centers, counts, lengths = centers[good], counts[good], lengths[good]
    if len(centers) < 2:
        raise DegenerateLattice("not enough difference-vector clusters")

    order = np.argsort(lengths, kind="stable")[:16]
    centers, lengths = centers[order], lengths[order]

    # keep only true pattern translations: bond vectors and vacancy
    # sublattices fail to map a large fraction of peaks onto peaks
    tree = cKDTree(pos)
    support = np.array(
        [
            _translation_support(pos, tree, v, min(0.4, 0.3 * ln))
            for v, ln in zip(centers, lengths)
        ]
    )
    translating = support >= cfg.translation_support_min
    if translating.sum() >= 2:
        cand, cand_len = centers[translating], lengths[translating]
    else:
        cand, cand_len = centers, lengths

    pairs = []
    for i in range(len(cand)):
        for j in range(i + 1, len(cand)):
            ang = _pair_angle(cand[i], cand[j])
            if cfg.min_pair_angle_deg <= ang <= 180.0 - cfg.min_pair_angle_deg:
                area = abs(np.cross(cand[i], cand[j]))
                pairs.append((area, cand_len[i] + cand_len[j], i, j))
    if not pairs:
        raise DegenerateLattice("all difference clusters collinear")
    pairs.sort(key=lambda t: (round(t[0], 6), round(t[1], 6)))

    state = None
    for area, _, i, j in pairs[:15]:
        va, vb = _gauss_reduce(cand[i], cand[j])
        state = _refine(pos, va, vb, cfg)
        if state is not None:
            break
    if state is None:
        raise DegenerateLattice("lattice refinement failed on all candidates")

    origin, mat, motif, labels, rms = state
    red_a, red_b = _gauss_reduce(mat[0], mat[1])
    if not (np.allclose(red_a, mat[0]) and np.allclose(red_b, mat[1])):
        restate = _refine(pos, red_a, red_b, cfg)
        if restate is not None:
            origin, mat, motif, labels, rms = restate
    fit = _apply_symmetry_snap(pos, origin, mat, motif, rms, cfg)
    if fit.residual_rms > cfg.poor_fit_rms:
        raise PoorFit(
            f"residual {fit.residual_rms:.3f} A exceeds gate {cfg.poor_fit_rms} A"
        )
    return fit


def _apply_symmetry_snap(pos, origin, mat, motif, rms, cfg: LatticeConfig) -> LatticeFit:
    va, vb = mat[0], mat[1]
    la, lb = np.linalg.norm(va), np.linalg.norm(vb)
    ang = _pair_angle(va, vb)
    equal_len = abs(la - lb) / max(la, lb) < cfg.snap_length_tol
    atol = cfg.snap_angle_tol_deg

    constraint = None
    symmetry = LatticeSymmetry.OBLIQUE
    if equal_len and (abs(ang - 60.0) < atol or abs(ang - 120.0) < atol):
        target = 60.0 if abs(ang - 60.0) < atol else 120.0
        signed = _signed_angle(va, vb)
        constraint = ("rot", math.copysign(target, signed))
        symmetry = LatticeSymmetry.HEXAGONAL
    elif abs(ang - 90.0) < atol and equal_len:
        signed = _signed_angle(va, vb)
        constraint = ("rot", math.copysign(90.0, signed))
        symmetry = LatticeSymmetry.SQUARE
    elif abs(ang - 90.0) < atol:
        constraint = ("rect", math.atan2(va[1], va[0]))
        symmetry = LatticeSymmetry.RECTANGULAR

    if constraint is None:
        return LatticeFit(va, vb, origin, rms, LatticeSymmetry.OBLIQUE)

    snapped = _refine(pos, va, vb, cfg, constraint=constraint)
    if symmetry is LatticeSymmetry.RECTANGULAR and snapped is not None:
        # refine the orientation angle with a small golden-section search
        theta0 = constraint[1]
        phi = (math.sqrt(5) - 1) / 2
        lo, hi = theta0 - math.radians(3), theta0 + math.radians(3)
        def rect_rms(theta):
            out = _refine(pos, va, vb, cfg, constraint=("rect", theta))
            return math.inf if out is None else out[4], out
        best_rms, best_state = rect_rms(theta0)
        a, b = lo, hi
        c, d = b - phi * (b - a), a + phi * (b - a)
        fc, sc = rect_rms(c)
        fd, sd = rect_rms(d)
        for _ in range(12):
            if fc < fd:
                b, d, fd, sd = d, c, fc, sc
                c = b - phi * (b - a)
                fc, sc = rect_rms(c)
            else:
                a, c, fc, sc = c, d, fd, sd
                d = a + phi * (b - a)
                fd, sd = rect_rms(d)
        for cand_rms, cand_state in ((fc, sc), (fd, sd)):
            if cand_rms < best_rms:
                best_rms, best_state = cand_rms, cand_state
        snapped = best_state

    if snapped is None:
        return LatticeFit(va, vb, origin, rms, LatticeSymmetry.OBLIQUE)
    s_origin, s_mat, _, _, s_rms = snapped
    if s_rms > cfg.snap_residual_factor * max(rms, 1e-12):
        return LatticeFit(va, vb, origin, rms, LatticeSymmetry.OBLIQUE)
    return LatticeFit(s_mat[0], s_mat[1], s_origin, s_rms, symmetry)


# ---------------------------------------------------------------------------
# Species assignment
# ---------------------------------------------------------------------------

def assign_species(
    ps: PeakSet,
    elements: tuple[Element, ...] | frozenset[Element],
    cfg: SpeciesConfig | None = None,
) -> tuple[list[tuple[Peak, Element]], float]:
    """Cluster peak intensities into len(elements) groups and map the
    brighter group to the heavier element (monotone-Z contrast).

    Returns the per-peak assignment and the species confidence (smallest
    inter-level gap over the intensity range). Raises ClusterCollapse when
    intensity levels are statistically indistinguishable.
    """
    cfg = cfg or SpeciesConfig()
    by_z = sorted(set(elements), key=lambda e: e.z)
    k = len(by_z)
    inten = ps.intensities
    peaks = ps.peaks
    if k == 1:
        return [(p, by_z[0]) for p in peaks], 1.0
    if len(inten) < k:
        raise ClusterCollapse(f"{len(inten)} peaks cannot support {k} species")

    centers, labels, sse = kmeans(inten[:, None], k)
    centers = centers[:, 0]  # ascending
    spread = math.sqrt(sse / len(inten))
    gaps = np.diff(centers)
    rng = float(inten.max() - inten.min())
    min_gap = float(gaps.min())
    if rng <= 0 or min_gap < cfg.collapse_gap_fraction * rng:
        raise ClusterCollapse("intensity levels closer than gap tolerance")
    if min_gap < cfg.collapse_spread_factor * spread:
        raise ClusterCollapse(
            f"level gap {min_gap:.3g} below {cfg.collapse_spread_factor} x "
            f"within-level spread {spread:.3g}"
        )
    confidence = min_gap / rng
    assigned = [(p, by_z[labels[i]]) for i, p in enumerate(peaks)]
    return assigned, float(confidence)


# ---------------------------------------------------------------------------
# Reduction to the unit cell
# ---------------------------------------------------------------------------

def _sublattice_reduce(motif_frac, motif_elem, mat, radius):
    """Halve a or b while the motif maps onto itself under that half-vector."""
    def maps_onto_itself(shift):
        for f, e in zip(motif_frac, motif_elem):
            target = _wrap_frac(f + shift)
            ok = False
            for g, h in zip(motif_frac, motif_elem):
                if h is not e:
                    continue
                d = target - g
                d -= np.round(d)
                cart = d @ mat
                if cart @ cart < radius * radius:
                    ok = True
                    break
            if not ok:
                return False
        return True

    changed = True
    while changed and len(motif_frac) > 1:
        changed = False
        for axis, shift in ((0, np.array([0.5, 0.0])), (1, np.array([0.0, 0.5]))):
            if len(motif_frac) % 2 == 0 and maps_onto_itself(shift):
                mat = mat.copy()
                mat[axis] /= 2.0
                scale = np.ones(2)
                scale[axis] = 2.0
                folded = _wrap_frac(motif_frac * scale)
                labels, centers = _torus_cluster(folded, mat, radius)
                new_elem = []
                for j in range(len(centers)):
                    members = [motif_elem[i] for i in np.nonzero(labels == j)[0]]
                    new_elem.append(members[0])
                motif_frac, motif_elem = centers, new_elem
                changed = True
                break
    return motif_frac, motif_elem, mat


def _align_to_template(motif_frac, motif_elem, template_struct, mat):
    """Best origin shift (plus axis swap/negation) matching the template motif."""
    t_frac = template_struct.frac_coords[:, :2]
    t_elem = template_struct.elements
    transforms = (
        np.array([[1.0, 0.0], [0.0, 1.0]]),
        np.array([[0.0, 1.0], [1.0, 0.0]]),
        np.array([[-1.0, 0.0], [0.0, -1.0]]),
        np.array([[0.0, -1.0], [-1.0, 0.0]]),
    )
    e0 = motif_elem[0]
    anchors = [f for f, e in zip(t_frac, t_elem) if e == e0]
    if not anchors:
        raise NoTemplateZ(f"template has no {e0.symbol} site")
    best = None
    for tf in transforms:
        moved = _wrap_frac(motif_frac @ tf.T)
        for anchor in anchors:
            shift = anchor - moved[0]
            cost = 0.0
            feasible = True
            for f, e in zip(moved, motif_elem):
                cands = [g for g, h in zip(t_frac, t_elem) if h == e]
                if not cands:
                    feasible = False
                    break
                d = np.array(cands) - _wrap_frac(f + shift)
                d -= np.round(d)
                cart = d @ mat
                cost += float((cart**2).sum(axis=1).min())
            if feasible and (best is None or cost < best[0]):
                best = (cost, tf, shift)
    if best is None:
        raise NoTemplateZ("no element-feasible alignment to template")
    return best[1], best[2]


def reduce_to_unit_cell(
    assigned: list[tuple[Peak, Element]],
    fit: LatticeFit,
    template_struct: CrystalStructure,
    cfg: LatticeConfig | None = None,
) -> tuple[CrystalStructure, int, int]:
    """Fold assigned peaks into one cell, merge the motif, pull z from the
    template, and emit a structure. Returns (structure, used, rejected)."""
    cfg = cfg or LatticeConfig()
    if not assigned:
        raise TooFewPeaks("no assigned peaks")
    pos = np.array([[p.x, p.y] for p, _ in assigned])
    elems = [e for _, e in assigned]
    mat = fit.matrix
    radius = cfg.motif_merge_frac * np.linalg.norm(fit.a_vec)

    frac = _wrap_frac((pos - fit.origin) @ np.linalg.inv(mat))
    labels, centers = _torus_cluster(frac, mat, radius)

    pops = np.bincount(labels, minlength=len(centers))
    pop_floor = max(1, int(0.25 * np.median(pops[pops > 0])))
    keep = pops >= max(2, pop_floor) if pops.max() >= 2 else pops >= 1

    motif_frac: list[np.ndarray] = []
    motif_elem: list[Element] = []
    used = 0
    for j in np.nonzero(keep)[0]:
        members = np.nonzero(labels == j)[0]
        counts: dict[Element, int] = {}
        for m in members:
            counts[elems[m]] = counts.get(elems[m], 0) + 1
        major = max(sorted(counts, key=lambda e: e.z), key=lambda e: counts[e])
        mix = 1.0 - counts[major] / len(members)
        if mix > cfg.motif_mix_fraction:
            raise MotifInconsistent(
                f"motif point mixes elements ({mix:.0%} minority)"
            )
        motif_frac.append(centers[j])
        motif_elem.append(major)
        used += len(members)
    rejected = len(assigned) - used
    if not motif_frac:
        raise TooFewPeaks("no populated motif points")

    motif_arr = np.array(motif_frac)
    motif_arr, motif_elem, mat = _sublattice_reduce(motif_arr, motif_elem, mat, radius)

    transform, shift = _align_to_template(motif_arr, motif_elem, template_struct, mat)
    aligned = _wrap_frac(motif_arr @ transform.T + shift)

    t_frac = template_struct.frac_coords
    t_elem = template_struct.elements
    z_vals = []
    for f, e in zip(aligned, motif_elem):
        cands = [(g, g3) for g3, h in zip(t_frac, t_elem) if h == e for g in [g3[:2]]]
        if not cands:
            raise NoTemplateZ(f"template has no {e.symbol} site")
        d = np.array([g for g, _ in cands]) - f
        d -= np.round(d)
        cart = d @ mat
        z_vals.append(float(cands[int(np.argmin((cart**2).sum(axis=1)))][1][2]))

    c_row = template_struct.lattice.vectors[2]
    lattice = Lattice(
        np.array(
            [
                [mat[0, 0], mat[0, 1], 0.0],
                [mat[1, 0], mat[1, 1], 0.0],
                c_row,
            ]
        )
    )
    sites = tuple(
        Site(np.array([f[0], f[1], z]), e)
        for f, e, z in zip(aligned, motif_elem, z_vals)
    )
    struct = CrystalStructure(lattice, sites, id=f"recon-{template_struct.id}")
    return struct, used, rejected


def reconstruct(
    img: StemImage,
    template_struct: CrystalStructure,
    template_id: str = "",
    peak_sigma: float = 0.4,
    peak_cfg: PeakConfig | None = None,
    lattice_cfg: LatticeConfig | None = None,
    species_cfg: SpeciesConfig | None = None,
) -> ReconstructionResult:
    """Full image-to-structure pass with a template prior for species and z."""
    peaks = detect_peaks(img, peak_sigma=peak_sigma, cfg=peak_cfg)
    fit = fit_lattice(peaks, cfg=lattice_cfg)
    assigned, confidence = assign_species(
        peaks, template_struct.elements, cfg=species_cfg
    )
    struct, used, rejected = reduce_to_unit_cell(
        assigned, fit, template_struct, cfg=lattice_cfg
    )
    if template_id:
        struct = CrystalStructure(struct.lattice, struct.sites, id=f"recon-{template_id}")
    return ReconstructionResult(struct, fit, used, rejected, confidence)
