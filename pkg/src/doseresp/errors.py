"""Exception hierarchy shared across the package."""


class DoseRespError(Exception):
    """Base class for all data and estimation errors."""


class MissingColumn(DoseRespError):
    pass


class InvalidConfig(DoseRespError):
    pass


class DuplicateObservation(DoseRespError):
    pass


class DoseOutOfRange(DoseRespError):
    pass


class NonPositiveDenominator(DoseRespError):
    pass


class IntensityAboveOne(DoseRespError):
    pass


class EmptySeries(DoseRespError):
    pass


class AllMissing(DoseRespError):
    pass


class EmptySubsample(DoseRespError):
    pass


class NonPositiveAssets(DoseRespError):
    pass


class EmptyGroup(DoseRespError):
    pass


class NoConsecutivePairs(DoseRespError):
    pass


class EmptySample(DoseRespError):
    pass


class RankDeficient(DoseRespError):
    """Raised when the design matrix is collinear; names the offending columns."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class SingleCluster(DoseRespError):
    pass


class DegenerateResample(DoseRespError):
    pass


class MissingClass(DoseRespError):
    pass


class PerfectSeparation(DoseRespError):
    pass


class SingularMatrix(DoseRespError):
    pass


class ConvergenceFailure(DoseRespError):
    pass


class NonPositiveForLog(DoseRespError):
    pass


class ZeroVariance(DoseRespError):
    pass


class SingularCovariance(DoseRespError):
    pass


class NoControls(DoseRespError):
    pass


class GridOutsideSupportWarning(UserWarning):
    """Requested curve grid extends beyond the observed dose support."""
