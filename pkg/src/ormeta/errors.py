"""Exception types shared across the package."""


class OrmetaError(Exception):
    """Base class for all package-specific errors."""


class TooFewStudies(OrmetaError):
    """Fewer than two usable studies remain after exclusions."""


class NonConvergence(OrmetaError):
    """An iterative routine failed to reach its tolerance within budget."""


class BootstrapFailure(OrmetaError):
    """A resampling-based moment estimate was requested with too few draws."""


class EmptyCell(OrmetaError):
    """A simulation cell has no usable replicates to aggregate."""


class SchemaError(OrmetaError):
    """An input file does not match the documented schema."""


class UnsupportedK(OrmetaError):
    """A study count incompatible with the requested size scheme."""
