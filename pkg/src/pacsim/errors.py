"""Exception hierarchy shared by all pacsim modules.

Every error raised by the package inherits from PacsimError so callers can
catch the whole family generically.
"""


class PacsimError(RuntimeError):
    """Base class for all pacsim errors."""


class InvalidInputError(PacsimError):
    """Non-finite or otherwise malformed numerical input."""


class ConfigError(PacsimError):
    """Invalid scene or schedule configuration."""


class BoundsError(PacsimError):
    """A query point or particle left the valid grid region."""


class DegenerateDeformationError(PacsimError):
    """Deformation state with nonpositive singular values."""


class InvertedElementError(PacsimError):
    """Deformation gradient with nonpositive determinant."""


class IncompressibleLimitError(PacsimError):
    """Poisson ratio at or beyond the incompressible limit (nu >= 0.5)."""


class EmptyGeometryError(PacsimError):
    """A voxel field with no occupied voxels was sampled."""


class NanGradientError(PacsimError):
    """A backward kernel produced a non-finite adjoint."""


class LineSearchStalledError(PacsimError):
    """Backtracking line search failed to find an acceptable step."""


class SimulationBlowupError(PacsimError):
    """Particle velocities exceeded the configured blow-up threshold."""


class CorruptCheckpointError(PacsimError):
    """Checkpoint container failed magic/shape/truncation validation."""


class UnsupportedVersionError(CorruptCheckpointError):
    """Checkpoint container written by an unknown format version."""


class DatasetIncompleteError(PacsimError):
    """A dataset directory is missing views, frames or metadata."""
