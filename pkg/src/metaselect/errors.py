"""Exception taxonomy shared across the package.

Two broad families matter to callers: problems with the input data
(:class:`DataError` and friends) and problems that arise during numerical
work on valid data (:class:`NumericError` and friends).  The command line
layer maps the first family to exit code 3 and the second to exit code 4.
"""


class MetaSelectError(Exception):
    """Base class for every error raised by this package."""


class DataError(MetaSelectError):
    """Malformed, inconsistent, or unusable input data."""


class MissingColumn(DataError):
    """A required column is absent from the input table."""


class NonNumericValue(DataError):
    """A cell that must parse as a number does not."""


class NonPositiveVariance(DataError):
    """A sampling variance is zero or negative."""


class MissingValue(DataError):
    """Missing entries found while the missing policy is ``error``."""


class AllMissingColumn(DataError):
    """A covariate column has no observed values at all."""


class ZeroVariance(DataError):
    """A covariate is constant and cannot be standardized."""


class SchemaError(DataError):
    """The covariate schema is malformed or contradicts the data."""


class MarginalityViolation(MetaSelectError):
    """An interaction is requested without both of its main effects."""


class IndexOutOfRange(MetaSelectError):
    """A covariate or coefficient index is outside the valid range."""


class NumericError(MetaSelectError):
    """Numerical failure while fitting or scoring a model."""


class SingularDesign(NumericError):
    """The weighted design matrix is singular or near singular."""


class InsufficientDF(NumericError):
    """Not enough studies for the requested number of coefficients."""


class ZeroStandardError(NumericError):
    """A Wald test was requested for a coefficient with zero variance."""


class DegenerateCorrection(NumericError):
    """The small-sample correction term has a non-positive denominator."""


class DimensionMismatch(NumericError):
    """Array arguments do not conform."""


class DegenerateVariance(NumericError):
    """A synthesized success probability collapsed to 0 or 1."""


class EmptyGroup(NumericError):
    """A grouping operation produced an empty cell."""
