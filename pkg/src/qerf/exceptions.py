"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`QERFError`.
Input problems additionally derive from :class:`ValueError`; numerical
breakdowns derive from :class:`NumericalError`. The CLI maps the two families
to different exit codes.
"""


class QERFError(Exception):
    """Base class for all package errors."""


class ValidationError(QERFError, ValueError):
    """Input data or arguments violate a documented precondition."""


class NumericalError(QERFError, ArithmeticError):
    """A computation could not produce a reliable number."""


# dataset


class MissingColumn(ValidationError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column!r} not found in input header")


class ParseFailure(ValidationError):
    """A CSV cell is missing or not a finite number.

    ``row`` is the 1-based data row (header excluded).
    """

    def __init__(self, row, col, value=None):
        self.row = row
        self.col = col
        self.value = value
        super().__init__(f"row {row}, column {col!r}: cannot parse {value!r} as a finite number")


class EmptyDataset(ValidationError):
    pass


class EmptyAfterTrim(ValidationError):
    pass


# gps


class RankDeficientDesign(NumericalError):
    pass


class DegenerateResidual(NumericalError):
    """Exposure is an exact function of the covariates, so the GPS has zero spread."""


class DimensionMismatch(ValidationError):
    pass


class DegenerateSample(ValidationError):
    pass


class GpsUnderflow(NumericalError):
    pass


# matching


class CaliperTooLarge(ValidationError):
    pass


class NoCandidatesAnywhere(NumericalError):
    pass


class DegenerateExposure(NumericalError):
    pass


# quantile


class ZeroTotalWeight(NumericalError):
    pass


class EmptyWindow(NumericalError):
    pass


class AllCandidatesDegenerate(NumericalError):
    pass


# inference


class InsufficientNeighbors(NumericalError):
    pass


class DensityFloorHit(NumericalError):
    pass


class ReplicateFailure(QERFError):
    """Too many bootstrap replicates or benchmark repetitions failed."""

    def __init__(self, failed, total, message=None):
        self.failed = failed
        self.total = total
        super().__init__(message or f"{failed} of {total} replicates failed")
