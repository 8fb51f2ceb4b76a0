"""Energy backends and structural relaxation.

The built-in model is a periodic Lennard-Jones potential with an
energy-shifted cutoff. Per-element sigma comes from covalent radii so
that bonded crystal geometries sit near the potential minimum; this keeps
formation energies smooth in the lattice constant, which is all the
benchmark exercises. External backends speak CIF-in / JSON-out over a
subprocess pipe and plug in behind the same interface.
"""

from __future__ import annotations

import json
import math
import subprocess
from dataclasses import dataclass, field
from typing import Protocol
from weakref import WeakKeyDictionary

import numpy as np

from .config import RelaxConfig
from .crystal import CrystalStructure, Lattice, Site, fold_frac, write_cif, parse_cif
from .elements import GAS_ELEMENTS, Element, element_from_symbol
from .errors import (
    AtomsTooClose,
    BackendFailure,
    BackendTimeout,
    MissingReference,
)

TWO_SIXTH = 2.0 ** (1.0 / 6.0)


class EnergyModel(Protocol):
    """Behavioral contract: total energy (eV) and per-site forces (eV/A)."""

    def energy_and_forces(
        self, s: CrystalStructure
    ) -> tuple[float, np.ndarray]: ...


@dataclass
class PairPotentialParams:
    """Per-element (epsilon, sigma) with Lorentz-Berthelot mixing."""

    table: dict[str, tuple[float, float]] = field(default_factory=dict)
    cutoff: float = 6.0
    epsilon_default: float = 0.4

    def for_element(self, e: Element) -> tuple[float, float]:
        if e.symbol in self.table:
            eps, sig = self.table[e.symbol]
        else:
            # dimer minimum at twice the covalent radius
            sig = 2.0 * e.covalent_radius / TWO_SIXTH
            eps = self.epsilon_default
        if eps <= 0 or sig <= 0:
            raise MissingReference(f"bad pair parameters for {e.symbol}")
        if self.cutoff <= sig * TWO_SIXTH:
            raise MissingReference(
                f"cutoff {self.cutoff} A inside the {e.symbol} potential minimum"
            )
        return eps, sig


@dataclass(eq=False)
class LennardJonesModel:
    """Periodic LJ sum over all images within the cutoff; analytic forces."""

    params: PairPotentialParams = field(default_factory=PairPotentialParams)
    min_distance: float = 0.5

    def _pair_tables(self, elements):
        eps = np.empty((len(elements), len(elements)))
        sig = np.empty_like(eps)
        per = [self.params.for_element(e) for e in elements]
        for i, (ei, si) in enumerate(per):
            for j, (ej, sj) in enumerate(per):
                eps[i, j] = math.sqrt(ei * ej)
                sig[i, j] = 0.5 * (si + sj)
        return eps, sig

    def energy_and_forces(self, s: CrystalStructure) -> tuple[float, np.ndarray]:
        cart = s.cart_coords
        return self._energy_and_forces_cart(s, cart)

    def _energy_and_forces_cart(self, s, cart):
        n = len(s.sites)
        vecs = s.lattice.vectors
        rc = self.params.cutoff
        eps, sig = self._pair_tables(s.elements)

        # image bounds from perpendicular cell heights
        vol = s.lattice.volume
        heights = np.array(
            [
                vol / np.linalg.norm(np.cross(vecs[1], vecs[2])),
                vol / np.linalg.norm(np.cross(vecs[2], vecs[0])),
                vol / np.linalg.norm(np.cross(vecs[0], vecs[1])),
            ]
        )
        bound = np.ceil(rc / heights).astype(int)
        shifts = []
        for i in range(-bound[0], bound[0] + 1):
            for j in range(-bound[1], bound[1] + 1):
                for k in range(-bound[2], bound[2] + 1):
                    if (i, j, k) > (0, 0, 0) or (i, j, k) == (0, 0, 0):
                        shifts.append((i, j, k))
        shifts = np.array(shifts, dtype=float) @ vecs  # half-space plus zero

        energy = 0.0
        forces = np.zeros((n, 3))
        min_d = math.inf
        for s_idx, shift in enumerate(shifts):
            is_zero = np.allclose(shift, 0.0)
            d = cart[None, :, :] + shift[None, None, :] - cart[:, None, :]
            r2 = (d**2).sum(axis=2)
            if is_zero:
                mask = np.triu(np.ones((n, n), dtype=bool), k=1)
            else:
                mask = np.ones((n, n), dtype=bool)
            mask &= r2 < rc * rc
            if not mask.any():
                continue
            ii, jj = np.nonzero(mask)
            rr2 = r2[ii, jj]
            min_d = min(min_d, math.sqrt(rr2.min()))
            if min_d < self.min_distance:
                raise AtomsTooClose(
                    f"minimum interatomic distance {min_d:.3f} A below "
                    f"{self.min_distance} A"
                )
            e_ij = eps[ii, jj]
            s_ij = sig[ii, jj]
            sr6 = (s_ij**2 / rr2) ** 3
            sr12 = sr6**2
            src6 = (s_ij / rc) ** 6
            shift_e = 4.0 * e_ij * (src6**2 - src6)
            energy += float(np.sum(4.0 * e_ij * (sr12 - sr6) - shift_e))
            # dU/dr * 1/r, applied along the displacement
            coef = (24.0 * e_ij * (2.0 * sr12 - sr6) / rr2)[:, None]
            fvec = coef * d[ii, jj]
            np.add.at(forces, jj, fvec)
            np.add.at(forces, ii, -fvec)
        return energy, forces


def energy_and_forces(
    s: CrystalStructure, model: EnergyModel
) -> tuple[float, np.ndarray]:
    """Evaluate a backend on a structure (dispatch helper)."""
    return model.energy_and_forces(s)


# ---------------------------------------------------------------------------
# Relaxation (FIRE-style descent with energy backtracking)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelaxationResult:
    structure: CrystalStructure
    energy_ev: float
    energy_per_atom_ev: float
    steps: int
    max_force_final: float
    converged: bool
    energy_trace: tuple[float, ...] = ()


def _structure_with_cart(s: CrystalStructure, cart: np.ndarray) -> CrystalStructure:
    frac = fold_frac(s.lattice.fractional(cart))
    sites = tuple(
        Site(f, site.element, site.occupancy) for f, site in zip(frac, s.sites)
    )
    out = CrystalStructure(s.lattice, sites, id=s.id)
    if len(out.sites) != len(s.sites):
        # construction merged colliding atoms; surface it as a collision
        raise AtomsTooClose("positions collapsed below the site-merge tolerance")
    return out


def relax(
    s: CrystalStructure,
    model: EnergyModel,
    f_tol: float = 0.05,
    max_steps: int = 500,
) -> RelaxationResult:
    """Descend on Cartesian positions (cell fixed) until forces fall below
    ``f_tol``. Steps that raise the energy or collide atoms are rejected
    with a halved timestep, so the accepted energy trace never increases.
    """
    cart = s.cart_coords.copy()
    vel = np.zeros_like(cart)
    dt = 0.05
    dt_max = 0.4
    alpha = 0.1
    n_min, n_good = 5, 0
    rejections = 0

    energy, forces = model.energy_and_forces(s)
    trace = [energy]
    steps = 0
    max_f = float(np.linalg.norm(forces, axis=1).max()) if len(forces) else 0.0

    while max_f > f_tol and steps < max_steps:
        steps += 1
        power = float((forces * vel).sum())
        if power > 0:
            n_good += 1
            fnorm = np.linalg.norm(forces)
            vnorm = np.linalg.norm(vel)
            if fnorm > 0:
                vel = (1 - alpha) * vel + alpha * vnorm * forces / fnorm
            if n_good > n_min:
                dt = min(dt * 1.1, dt_max)
                alpha *= 0.99
        else:
            vel[:] = 0.0
            dt *= 0.5
            alpha = 0.1
            n_good = 0
        vel = vel + dt * forces
        trial = cart + dt * vel

        try:
            trial_struct = _structure_with_cart(s, trial)
            e_new, f_new = model.energy_and_forces(trial_struct)
        except AtomsTooClose:
            rejections += 1
            if rejections > 10:
                raise
            vel[:] = 0.0
            dt *= 0.5
            continue
        if e_new > energy + 1e-12:
            vel[:] = 0.0
            dt *= 0.5
            continue
        cart, energy, forces = trial, e_new, f_new
        trace.append(energy)
        max_f = float(np.linalg.norm(forces, axis=1).max())

    final = _structure_with_cart(s, cart)
    return RelaxationResult(
        structure=final,
        energy_ev=energy,
        energy_per_atom_ev=energy / len(s.sites),
        steps=steps,
        max_force_final=max_f,
        converged=max_f <= f_tol,
        energy_trace=tuple(trace),
    )


# ---------------------------------------------------------------------------
# Formation energy against per-element reference lattices
# ---------------------------------------------------------------------------

def reference_structure(e: Element) -> CrystalStructure:
    """Reference phase: dimer in a box for gases, graphene for C, FCC else."""
    sym = e.symbol
    if sym == "C":
        a = 2.46
        lat = Lattice.from_parameters(a, a, 20.0, 90, 90, 120)
        sites = (
            Site(np.array([0.0, 0.0, 0.5]), e),
            Site(np.array([1 / 3, 2 / 3, 0.5]), e),
        )
        return CrystalStructure(lat, sites, id="ref-C-graphene")
    if sym in GAS_ELEMENTS:
        box = 30.0
        r_min = 2.0 * e.covalent_radius
        lat = Lattice(np.eye(3) * box)
        sites = (
            Site(np.array([0.5, 0.5, 0.5]), e),
            Site(np.array([0.5 + r_min / box, 0.5, 0.5]), e),
        )
        return CrystalStructure(lat, sites, id=f"ref-{sym}-dimer")
    r_min = 2.0 * e.covalent_radius
    a = r_min * math.sqrt(2.0)
    lat = Lattice(np.eye(3) * a)
    sites = tuple(
        Site(np.array(f), e)
        for f in ((0.0, 0.0, 0.0), (0.5, 0.5, 0.0), (0.5, 0.0, 0.5), (0.0, 0.5, 0.5))
    )
    return CrystalStructure(lat, sites, id=f"ref-{sym}-fcc")


_REF_CACHE: "WeakKeyDictionary[object, dict[int, float]]" = WeakKeyDictionary()


def reference_energy_per_atom(e: Element, model: EnergyModel) -> float:
    try:
        cache = _REF_CACHE.setdefault(model, {})
    except TypeError:
        cache = {}
    if e.z not in cache:
        ref = reference_structure(e)
        result = relax(ref, model)
        cache[e.z] = result.energy_per_atom_ev
    return cache[e.z]


def formation_energy_per_atom(s: CrystalStructure, model: EnergyModel) -> float:
    """E_form = (E_total - sum of elemental references) / N, in eV/atom."""
    energy, _ = model.energy_and_forces(s)
    try:
        ref_sum = sum(
            reference_energy_per_atom(site.element, model) for site in s.sites
        )
    except MissingReference:
        raise
    return (energy - ref_sum) / len(s.sites)


# ---------------------------------------------------------------------------
# External subprocess backend
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ExternalBackend:
    """CIF on stdin, one-line JSON ``{"energy_ev", "forces"}`` on stdout."""

    cmd: list[str]
    timeout_s: float = 120.0

    def energy_and_forces(self, s: CrystalStructure) -> tuple[float, np.ndarray]:
        cif = write_cif(s)
        try:
            proc = subprocess.run(
                self.cmd,
                input=cif.encode(),
                capture_output=True,
                timeout=self.timeout_s,
            )
        except subprocess.TimeoutExpired as exc:
            raise BackendTimeout(
                f"backend {self.cmd[0]} exceeded {self.timeout_s}s"
            ) from exc
        except OSError as exc:
            raise BackendFailure(f"cannot launch backend: {exc}") from exc
        if proc.returncode != 0:
            raise BackendFailure(
                f"backend exited {proc.returncode}: {proc.stderr.decode()[:500]}"
            )
        try:
            reply = json.loads(proc.stdout.decode().strip().splitlines()[-1])
            energy = float(reply["energy_ev"])
            forces = np.array(reply["forces"], dtype=float)
        except (ValueError, KeyError, IndexError) as exc:
            raise BackendFailure(f"malformed backend reply: {exc}") from exc
        if forces.shape != (len(s.sites), 3) or not np.all(np.isfinite(forces)):
            raise BackendFailure(
                f"backend force array has shape {forces.shape}, "
                f"expected ({len(s.sites)}, 3)"
            )
        return energy, forces


def external_backend(cmd: list[str] | str, timeout_s: float = 120.0) -> ExternalBackend:
    """Wrap a subprocess command as an EnergyModel."""
    if isinstance(cmd, str):
        cmd = cmd.split()
    return ExternalBackend(list(cmd), timeout_s=timeout_s)


def builtin_model(cfg: RelaxConfig | None = None) -> LennardJonesModel:
    cfg = cfg or RelaxConfig()
    params = PairPotentialParams(
        cutoff=cfg.cutoff, epsilon_default=cfg.epsilon_default
    )
    return LennardJonesModel(params=params, min_distance=cfg.min_distance)
