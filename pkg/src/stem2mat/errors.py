"""Exception types raised across the pipeline.

Every error carries an optional ``stage`` tag so the orchestrator can
attribute failures to the pipeline stage that produced them.
"""

from __future__ import annotations


class Stem2MatError(Exception):
    """Base class for all package errors."""

    stage: str | None = None

    def __init__(self, message: str = "", *, stage: str | None = None):
        super().__init__(message)
        if stage is not None:
            self.stage = stage


# crystal-core
class MalformedCif(Stem2MatError):
    """CIF text is missing cell parameters or a usable atom loop."""


class UnknownElement(Stem2MatError):
    """Chemical symbol not in the supported periodic table."""


class DegenerateLattice(Stem2MatError):
    """Lattice vectors are singular, left-handed, or non-finite."""


class OverflowingSupercell(Stem2MatError):
    """Requested supercell exceeds the configured site-count cap."""


# stem-forward
class EmptyStructure(Stem2MatError):
    """Structure has no sites to render."""


class ExtentTooSmall(Stem2MatError):
    """Projected cell extent is below the minimum renderable size."""


# denoise
class ConstantImage(Stem2MatError):
    """Image has zero dynamic range; noise level is undefined."""


# template-retrieval
class EmptyLibrary(Stem2MatError):
    """Template library contains no valid entries."""


class NoPeaks(Stem2MatError):
    """No atomic columns detected in the image."""


# stem2cif
class SaturatedImage(Stem2MatError):
    """Threshold covers most of the image; upstream denoising failed."""


class TooFewPeaks(Stem2MatError):
    """Not enough peaks to constrain a 2-D lattice."""


class PoorFit(Stem2MatError):
    """Lattice-fit residual exceeds the acceptance gate."""


class ClusterCollapse(Stem2MatError):
    """Intensity clusters are indistinguishable; species cannot be assigned."""


class MotifInconsistent(Stem2MatError):
    """Folded motif mixes elements beyond the tolerated fraction."""


class NoTemplateZ(Stem2MatError):
    """Template lacks a site to supply the z coordinate of a motif point."""


# relax-predict
class AtomsTooClose(Stem2MatError):
    """Minimum interatomic distance below the hard floor."""


class BackendFailure(Stem2MatError):
    """External energy backend exited abnormally or replied with garbage."""


class BackendTimeout(Stem2MatError):
    """External energy backend did not reply within the deadline."""


class MissingReference(Stem2MatError):
    """No potential parameters or reference lattice for an element."""


class NotConverged(Stem2MatError):
    """Relaxation hit the step cap (flagged in results, rarely raised)."""


# bench
class DoseOutOfRange(Stem2MatError):
    """Electron dose outside the benchmark's defined interval."""


class LengthMismatch(Stem2MatError):
    """Paired metric inputs have different lengths."""


class EmptyList(Stem2MatError):
    """Metric aggregate over an empty collection."""


class TooFewItems(Stem2MatError):
    """Fewer items than requested clusters."""


class IdMismatch(Stem2MatError):
    """Prediction ids do not line up with benchmark entry ids."""


class ManifestError(Stem2MatError):
    """Benchmark manifest is unreadable or malformed."""
