"""Exception hierarchy shared across the package."""


class VarRecalError(Exception):
    """Base class for all package errors."""


class IngestError(VarRecalError):
    """Raised when market data cannot be read, fetched or cleaned."""


class MalformedRow(IngestError):
    pass


class EmptySeries(IngestError):
    pass


class OhlcViolation(IngestError):
    pass


class NoOverlap(IngestError):
    pass


class TooShort(VarRecalError):
    pass


class BadConfig(VarRecalError):
    pass


class NonpositiveInput(VarRecalError, ValueError):
    pass


class EmptyTrainWindow(VarRecalError):
    pass


class BadKappa(VarRecalError, ValueError):
    pass


class EmptyTrain(VarRecalError):
    pass


class EmptySample(VarRecalError):
    pass


class MissingRegime(VarRecalError):
    pass


class NonpositiveProxy(VarRecalError, ValueError):
    pass


class BadOrdering(VarRecalError, ValueError):
    pass


class EmptyCandidates(VarRecalError):
    pass


class EmptyGrid(VarRecalError):
    pass


class LengthMismatch(VarRecalError, ValueError):
    pass


class BadDistribution(VarRecalError, ValueError):
    pass


class MissingRun(VarRecalError):
    pass
