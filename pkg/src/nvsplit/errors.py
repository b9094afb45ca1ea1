"""Exception hierarchy shared by every module of the package."""


class NVError(Exception):
    """Base class for all package errors."""


class NumericalFailure(NVError, ArithmeticError):
    """A field evaluation or integrator produced non-finite or overflowing values."""


class DimensionError(NVError, ValueError):
    """Array or field dimensions do not agree."""


class UnsupportedModel(NVError, ValueError):
    """The requested scheme cannot be applied to this model."""


class ConfigError(NVError, ValueError):
    """Incompatible grids, bad refinement factors or malformed configuration."""


class DegenerateData(NVError):
    """Errors sit at the numerical floor, so a rate cannot be fitted."""


class DomainError(NVError, ValueError):
    """Argument outside the domain of a closed-form formula."""
