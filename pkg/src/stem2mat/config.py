"""Central pipeline configuration.

Every tunable threshold referenced by the stages lives here so that a
single JSON file (or the ``STEM2MAT_CONFIG`` environment variable) can
override the declared defaults.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

ENV_CONFIG_VAR = "STEM2MAT_CONFIG"


@dataclass
class DenoiseConfig:
    # sigma_rel gating thresholds: passthrough / light / moderate / heavy
    passthrough_below: float = 0.02
    light_below: float = 0.08
    moderate_below: float = 0.20
    gaussian_sigma_px: float = 1.0
    median_size_px: int = 3
    nlm_patch_size: int = 5
    nlm_patch_distance: int = 5
    nlm_h_factor: float = 0.8


@dataclass
class PeakConfig:
    min_separation: float = 0.8          # A; closer peaks merge to the brighter
    min_area_radius_factor: float = 0.5  # min component area = circle of radius factor*peak_sigma
    saturation_fraction: float = 0.6     # above-threshold fraction that flags failed denoising
    border_margin_factor: float = 2.0    # peaks within factor*peak_sigma of the border are dropped


@dataclass
class LatticeConfig:
    neighbor_count: int = 8
    diff_cluster_radius: float = 0.25    # A, difference-vector clustering
    min_pair_angle_deg: float = 20.0
    min_vector_length: float = 0.5       # A, reject shorter difference clusters
    translation_support_min: float = 0.8
    motif_merge_frac: float = 0.15       # merge folded motif points within frac*|a| (A)
    motif_mix_fraction: float = 0.20     # element-mix tolerance before MotifInconsistent
    snap_length_tol: float = 0.03
    snap_angle_tol_deg: float = 3.0
    snap_residual_factor: float = 2.0    # reject snap if residual grows more than this
    poor_fit_rms: float = 0.35           # A, PoorFit gate
    refine_max_iter: int = 20
    refine_tol: float = 1e-4             # A, residual change convergence


@dataclass
class SpeciesConfig:
    collapse_gap_fraction: float = 0.05  # centers closer than this fraction of range collapse
    collapse_spread_factor: float = 2.0  # centers closer than factor*within-cluster spread collapse


@dataclass
class RetrievalConfig:
    template_supercell: int = 4
    rotation_step_deg: float = 15.0      # grid spans [0, 180)
    scales: tuple[float, ...] = (0.9, 0.95, 1.0, 1.05, 1.1)
    signature_tolerance: float = 0.15
    min_level_separation: float = 0.12   # contrast levels closer than this merge
    level_sse_drop: float = 0.20         # extra cluster must cut SSE by this factor
    match_pixel_size: float = 0.25       # A/px working resolution for ZNCC search


@dataclass
class RelaxConfig:
    f_tol: float = 0.05                  # eV/A
    max_steps: int = 500
    cutoff: float = 6.0                  # A
    epsilon_default: float = 0.4         # eV, per-element well depth
    min_distance: float = 0.5            # A, AtomsTooClose floor
    backend_timeout_s: float = 120.0


@dataclass
class BenchConfig:
    dup_grid: float = 1.0                # A
    dup_ratio_max: float = 0.10
    z_thickness_max: float = 3.0         # A
    z_span_min: int = 10
    max_elements: int = 3
    dose_min: float = 1e4
    dose_max: float = 6e4
    tier1_dose_min: float = 5e4
    tier3_dose_max: float = 2e4
    ss_threshold: float = 0.8
    unmatched_penalty_sq: float = 1.0    # A^2 per unmatched atom in MSE_2D


@dataclass
class OrchestratorConfig:
    max_retries: int = 2
    match_top_k: int = 3
    zncc_min: float = 0.5
    parallelism: int = 1


@dataclass
class PipelineConfig:
    """Bundle of per-stage settings plus imaging defaults."""

    pixel_size: float = 0.1              # A/px
    blur_sigma: float = 0.5              # A
    peak_sigma: float = 0.4              # A
    contrast_exponent: float = 0.7
    supercell_min: int = 12
    supercell_max: int = 16
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    peaks: PeakConfig = field(default_factory=PeakConfig)
    lattice: LatticeConfig = field(default_factory=LatticeConfig)
    species: SpeciesConfig = field(default_factory=SpeciesConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    relax: RelaxConfig = field(default_factory=RelaxConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    orchestrator: OrchestratorConfig = field(default_factory=OrchestratorConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        cfg = cls()
        for key, value in data.items():
            if not hasattr(cfg, key):
                raise KeyError(f"unknown config key {key!r}")
            current = getattr(cfg, key)
            if dataclasses.is_dataclass(current):
                for sub_key, sub_value in value.items():
                    if not hasattr(current, sub_key):
                        raise KeyError(f"unknown config key {key}.{sub_key}")
                    if isinstance(getattr(current, sub_key), tuple):
                        sub_value = tuple(sub_value)
                    setattr(current, sub_key, sub_value)
            else:
                setattr(cfg, key, value)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Load configuration from ``path``, else ``$STEM2MAT_CONFIG``, else defaults."""
    if path is None:
        path = os.environ.get(ENV_CONFIG_VAR) or None
    if path is None:
        return PipelineConfig()
    return PipelineConfig.from_json(Path(path).read_text())
