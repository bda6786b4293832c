"""Exception and warning classes raised by po2pls."""


class PO2PLSError(Exception):
    """Base class for all package errors."""


class InvalidRanks(PO2PLSError, ValueError):
    pass


class InvalidParams(PO2PLSError, ValueError):
    pass


class NonOrthogonalLoadings(InvalidParams):
    pass


class RankDeficientConcatenation(InvalidParams):
    pass


class NonPositiveVariance(InvalidParams):
    pass


class OrderingViolation(InvalidParams):
    pass


class DimensionMismatch(PO2PLSError, ValueError):
    pass


class RankDeficient(PO2PLSError, ValueError):
    """Raised by ``orth`` when the input does not have full column rank."""


class SingularLatentCovariance(PO2PLSError, ArithmeticError):
    pass


class SingularMomentMatrix(PO2PLSError, ArithmeticError):
    pass


class RanksExceedSampleSize(PO2PLSError, ValueError):
    pass


class DegenerateData(PO2PLSError, ValueError):
    pass


class NonPositiveInformation(PO2PLSError, ArithmeticError):
    """Approximate Fisher information for B is not positive.

    The asymptotic test cannot be formed; use a resampling method instead.
    """

    def __init__(self, message, information=None):
        super().__init__(message)
        self.information = information


class InvalidConfig(PO2PLSError, ValueError):
    pass


class ResamplingFailure(PO2PLSError, RuntimeError):
    pass


class DataFormatError(PO2PLSError, ValueError):
    pass


class RaggedRows(DataFormatError):
    pass


class NonNumericCell(DataFormatError):
    pass


class ModelFileError(PO2PLSError, ValueError):
    pass


class SigmaHFloorHit(UserWarning):
    """Some heterogeneity variance was floored before inverting it."""


class VarianceFloorHit(UserWarning):
    pass
