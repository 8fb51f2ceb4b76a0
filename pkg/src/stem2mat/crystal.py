"""Crystallographic data model: lattices, sites, CIF subset I/O, projections.

Structures are immutable value objects. The CIF dialect understood here is
the minimal cell-parameters-plus-atom-loop subset; unknown tags and loops
are skipped.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .elements import Element, element_from_symbol
from .errors import (
    DegenerateLattice,
    EmptyStructure,
    MalformedCif,
    OverflowingSupercell,
)

FOLD_SNAP = 1e-9        # fractional parts this close to 1 wrap to 0
MERGE_TOL = 0.3         # A; closer sites collapse to the first one
SUPERCELL_CAP = 50_000  # make_supercell site-count guard
_MERGE_SCAN_LIMIT = 1500  # skip O(n^2) merge above this; large cells come pre-merged


def fold_frac(values: np.ndarray, snap: float = FOLD_SNAP) -> np.ndarray:
    """Wrap fractional coordinates into [0, 1) with a snap-to-zero guard."""
    f = np.asarray(values, dtype=float) % 1.0
    f = np.where(f > 1.0 - snap, 0.0, f)
    return np.where(np.abs(f) < snap, 0.0, f)


@dataclass(frozen=True, eq=False)
class Lattice:
    """Right-handed lattice; rows of ``vectors`` are a, b, c in angstrom."""

    vectors: np.ndarray

    def __post_init__(self):
        m = np.array(self.vectors, dtype=float).reshape(3, 3)
        m.setflags(write=False)
        object.__setattr__(self, "vectors", m)
        if not np.all(np.isfinite(m)):
            raise DegenerateLattice("lattice vectors must be finite")
        if np.linalg.det(m) <= 1e-12:
            raise DegenerateLattice(f"lattice determinant {np.linalg.det(m):.3g} <= 0")

    @classmethod
    def from_parameters(
        cls, a: float, b: float, c: float, alpha: float, beta: float, gamma: float
    ) -> "Lattice":
        """Build the standard-orientation lattice from lengths (A) and angles (deg)."""
        if min(a, b, c) <= 0:
            raise DegenerateLattice("cell lengths must be positive")
        ca, cb, cg = (math.cos(math.radians(x)) for x in (alpha, beta, gamma))
        sg = math.sin(math.radians(gamma))
        if abs(sg) < 1e-12:
            raise DegenerateLattice("gamma angle degenerate")
        v_sq = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg
        if v_sq <= 1e-12:
            raise DegenerateLattice("cell angles give non-positive volume")
        return cls(
            np.array(
                [
                    [a, 0.0, 0.0],
                    [b * cg, b * sg, 0.0],
                    [c * cb, c * (ca - cb * cg) / sg, c * math.sqrt(v_sq) / sg],
                ]
            )
        )

    @property
    def lengths(self) -> tuple[float, float, float]:
        n = np.linalg.norm(self.vectors, axis=1)
        return float(n[0]), float(n[1]), float(n[2])

    @property
    def angles(self) -> tuple[float, float, float]:
        """(alpha, beta, gamma) in degrees."""
        a, b, c = self.vectors
        def ang(u, v):
            cosv = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
            return math.degrees(math.acos(np.clip(cosv, -1.0, 1.0)))
        return ang(b, c), ang(a, c), ang(a, b)

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.vectors))

    def cartesian(self, frac: np.ndarray) -> np.ndarray:
        return np.asarray(frac, dtype=float) @ self.vectors

    def fractional(self, cart: np.ndarray) -> np.ndarray:
        return np.asarray(cart, dtype=float) @ np.linalg.inv(self.vectors)


@dataclass(frozen=True, eq=False)
class Site:
    """One atom: fractional position in [0,1), element, occupancy in (0,1]."""

    frac: np.ndarray
    element: Element
    occupancy: float = 1.0

    def __post_init__(self):
        f = np.array(self.frac, dtype=float).reshape(3)
        f.setflags(write=False)
        object.__setattr__(self, "frac", f)
        if not 0.0 < self.occupancy <= 1.0:
            raise ValueError(f"occupancy {self.occupancy} outside (0, 1]")


@dataclass(frozen=True, eq=False)
class CrystalStructure:
    """Lattice plus an ordered site list; coordinates are folded on build."""

    lattice: Lattice
    sites: tuple[Site, ...]
    id: str = ""

    def __post_init__(self):
        sites = tuple(self.sites)
        if not sites:
            raise EmptyStructure("structure needs at least one site")
        folded = [
            Site(fold_frac(s.frac), s.element, s.occupancy) for s in sites
        ]
        if len(folded) <= _MERGE_SCAN_LIMIT:
            folded = _merge_close_sites(self.lattice, folded, MERGE_TOL)
        object.__setattr__(self, "sites", tuple(folded))

    def __len__(self) -> int:
        return len(self.sites)

    @property
    def frac_coords(self) -> np.ndarray:
        return np.array([s.frac for s in self.sites])

    @property
    def cart_coords(self) -> np.ndarray:
        return self.lattice.cartesian(self.frac_coords)

    @property
    def elements(self) -> tuple[Element, ...]:
        return tuple(s.element for s in self.sites)

    def composition(self) -> dict[Element, int]:
        counts: dict[Element, int] = {}
        for s in self.sites:
            counts[s.element] = counts.get(s.element, 0) + 1
        return counts


def _min_image_cart(lattice: Lattice, dfrac: np.ndarray) -> np.ndarray:
    """Cartesian displacement for a fractional difference, nearest image."""
    d = dfrac - np.round(dfrac)
    return d @ lattice.vectors


def _merge_close_sites(lattice: Lattice, sites: list[Site], tol: float) -> list[Site]:
    kept: list[Site] = []
    for s in sites:
        dup = False
        for k in kept:
            d = _min_image_cart(lattice, s.frac - k.frac)
            if float(np.dot(d, d)) < tol * tol:
                dup = True
                break
        if not dup:
            kept.append(s)
    return kept


# ---------------------------------------------------------------------------
# CIF subset I/O
# ---------------------------------------------------------------------------

_CELL_TAGS = (
    "_cell_length_a", "_cell_length_b", "_cell_length_c",
    "_cell_angle_alpha", "_cell_angle_beta", "_cell_angle_gamma",
)
_SITE_TAGS = {
    "_atom_site_type_symbol": "symbol",
    "_atom_site_fract_x": "fx",
    "_atom_site_fract_y": "fy",
    "_atom_site_fract_z": "fz",
    "_atom_site_occupancy": "occ",
}


def _cif_float(token: str) -> float:
    # tolerate su notation like 3.0150(4)
    token = re.sub(r"\(\d+\)$", "", token)
    try:
        return float(token)
    except ValueError as exc:
        raise MalformedCif(f"bad numeric value {token!r}") from exc


def parse_cif(text: str) -> CrystalStructure:
    """Parse the supported CIF subset into a structure.

    Recognizes cell lengths/angles and one atom loop with type symbol and
    fractional coordinates (occupancy optional). ``#`` comments, unknown
    tags, unknown loops, and multi-line ``;`` blocks are ignored.
    """
    lines = []
    in_text_block = False
    for raw in text.splitlines():
        line = raw.strip()
        if in_text_block:
            if line.startswith(";"):
                in_text_block = False
            continue
        if line.startswith(";"):
            in_text_block = True
            continue
        line = line.split("#", 1)[0].strip()
        if line:
            lines.append(line)

    cell: dict[str, float] = {}
    struct_id = ""
    rows: list[dict[str, str]] = []

    i = 0
    while i < len(lines):
        line = lines[i]
        lower = line.lower()
        if lower.startswith("data_"):
            struct_id = line[5:]
            i += 1
        elif lower == "loop_":
            headers: list[str] = []
            i += 1
            while i < len(lines) and lines[i].startswith("_"):
                headers.append(lines[i].split()[0].lower())
                i += 1
            body: list[list[str]] = []
            while i < len(lines):
                nxt = lines[i].lower()
                if nxt.startswith("_") or nxt == "loop_" or nxt.startswith("data_"):
                    break
                body.append(lines[i].split())
                i += 1
            cols = {name: headers.index(name) for name in _SITE_TAGS if name in headers}
            if "_atom_site_fract_x" in cols:
                if not {"_atom_site_type_symbol", "_atom_site_fract_y",
                        "_atom_site_fract_z"} <= set(cols):
                    raise MalformedCif("atom loop lacks symbol or coordinate columns")
                for tokens in body:
                    if len(tokens) < len(headers):
                        raise MalformedCif(f"short atom-loop row: {' '.join(tokens)!r}")
                    rows.append({
                        _SITE_TAGS[name]: tokens[idx] for name, idx in cols.items()
                    })
        elif line.startswith("_"):
            parts = line.split(None, 1)
            tag = parts[0].lower()
            if tag in _CELL_TAGS:
                if len(parts) < 2:
                    raise MalformedCif(f"tag {tag} has no value")
                cell[tag] = _cif_float(parts[1].split()[0])
            i += 1
        else:
            i += 1  # stray token outside any recognized construct

    missing = [t for t in _CELL_TAGS if t not in cell]
    if missing:
        raise MalformedCif(f"missing cell parameters: {', '.join(missing)}")
    if not rows:
        raise MalformedCif("no atom_site loop found")

    lattice = Lattice.from_parameters(*(cell[t] for t in _CELL_TAGS))
    sites = [
        Site(
            np.array([_cif_float(r["fx"]), _cif_float(r["fy"]), _cif_float(r["fz"])]),
            element_from_symbol(r["symbol"]),
            _cif_float(r["occ"]) if "occ" in r else 1.0,
        )
        for r in rows
    ]
    return CrystalStructure(lattice, tuple(sites), id=struct_id)


def write_cif(s: CrystalStructure, comments: tuple[str, ...] = ()) -> str:
    """Render a structure to CIF text; deterministic (sites sorted) and
    reparseable by :func:`parse_cif`."""
    a, b, c = s.lattice.lengths
    alpha, beta, gamma = s.lattice.angles
    out = [f"data_{s.id or 'structure'}".replace(" ", "_")]
    out += [f"# {line}" for line in comments]
    out += [
        f"_cell_length_a {a:.10f}",
        f"_cell_length_b {b:.10f}",
        f"_cell_length_c {c:.10f}",
        f"_cell_angle_alpha {alpha:.10f}",
        f"_cell_angle_beta {beta:.10f}",
        f"_cell_angle_gamma {gamma:.10f}",
        "loop_",
        "_atom_site_type_symbol",
        "_atom_site_fract_x",
        "_atom_site_fract_y",
        "_atom_site_fract_z",
        "_atom_site_occupancy",
    ]
    ordered = sorted(
        s.sites, key=lambda t: (t.element.symbol, tuple(np.round(t.frac, 10)))
    )
    for site in ordered:
        fx, fy, fz = site.frac
        out.append(
            f"{site.element.symbol} {fx:.10f} {fy:.10f} {fz:.10f} "
            f"{site.occupancy:.6f}"
        )
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Geometry operations
# ---------------------------------------------------------------------------

def make_supercell(
    s: CrystalStructure, nx: int, ny: int, nz: int, cap: int = SUPERCELL_CAP
) -> CrystalStructure:
    """Replicate the cell nx x ny x nz; lattice rows scale accordingly."""
    if min(nx, ny, nz) < 1:
        raise ValueError("supercell multipliers must be >= 1")
    total = nx * ny * nz * len(s.sites)
    if total > cap:
        raise OverflowingSupercell(f"{total} sites exceeds cap {cap}")
    if (nx, ny, nz) == (1, 1, 1):
        return s
    reps = np.array([nx, ny, nz], dtype=float)
    lattice = Lattice(s.lattice.vectors * reps[:, None])
    sites = []
    for ix in range(nx):
        for iy in range(ny):
            for iz in range(nz):
                shift = np.array([ix, iy, iz], dtype=float)
                for site in s.sites:
                    sites.append(
                        Site((site.frac + shift) / reps, site.element, site.occupancy)
                    )
    return CrystalStructure(lattice, tuple(sites), id=s.id)


def projected_xy(s: CrystalStructure) -> np.ndarray:
    """(N, 2) in-plane Cartesian coordinates in site order."""
    return s.cart_coords[:, :2]


def project_xy(s: CrystalStructure) -> list[tuple[float, float, Element]]:
    """Project sites onto the (x, y) plane, discarding z."""
    xy = projected_xy(s)
    return [(float(x), float(y), site.element) for (x, y), site in zip(xy, s.sites)]


def duplication_ratio(s: CrystalStructure, grid: float = 1.0) -> float:
    """Fraction of occupied in-plane grid cells holding two or more atoms."""
    if grid <= 0:
        raise ValueError("grid must be positive")
    cells = np.floor(projected_xy(s) / grid).astype(int)
    _, counts = np.unique(cells, axis=0, return_counts=True)
    return float(np.sum(counts >= 2) / len(counts))


def z_thickness(s: CrystalStructure) -> float:
    """Cartesian z extent (max - min) over all sites."""
    z = s.cart_coords[:, 2]
    return float(z.max() - z.min())


# ---------------------------------------------------------------------------
# Fingerprints
# ---------------------------------------------------------------------------

FINGERPRINT_DIM = 118 + 6 + 1


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """Composition histogram plus lattice descriptors plus site count."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(FINGERPRINT_DIM)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def fingerprint(s: CrystalStructure) -> Fingerprint:
    """Permutation-invariant structural descriptor; composition block sums to 1."""
    hist = np.zeros(118)
    for site in s.sites:
        hist[site.element.z - 1] += 1.0
    hist /= hist.sum()
    lengths = s.lattice.lengths
    angles = s.lattice.angles
    return Fingerprint(np.concatenate([hist, lengths, angles, [len(s.sites)]]))
