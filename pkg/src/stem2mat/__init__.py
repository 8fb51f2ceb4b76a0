"""stem2mat: atomic-resolution STEM images to crystal structures and properties."""

from .config import PipelineConfig, load_config
from .crystal import (
    CrystalStructure,
    Fingerprint,
    Lattice,
    Site,
    duplication_ratio,
    fingerprint,
    make_supercell,
    parse_cif,
    project_xy,
    write_cif,
    z_thickness,
)
from .elements import Element, element_from_symbol, element_from_z
from .imaging import (
    AtomMask,
    ImagingConfig,
    StemImage,
    apply_blur,
    apply_poisson_noise,
    load_raw,
    render_atom_mask,
    render_projection,
    save_raw,
    simulate,
)

__version__ = "0.1.0"
