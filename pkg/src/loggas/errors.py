"""Exception types shared across modules."""


class LogGasError(Exception):
    """Base class. ``kind`` is used by the CLI to pick an exit code."""

    kind = "numerical"


class ValidationError(LogGasError):
    kind = "validation"

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class NonConfining(LogGasError):
    pass


class NoConvergence(LogGasError):
    pass


class MultiCutDetected(LogGasError):
    pass


class NotAProbability(LogGasError):
    pass


class CoincidentPoints(LogGasError):
    pass


class InvalidBeta(LogGasError):
    kind = "validation"


class EigensolverFailure(LogGasError):
    pass


class NotBurnedIn(LogGasError):
    kind = "validation"


class MassMismatch(LogGasError):
    pass


class SingularEvaluation(LogGasError):
    pass


class TruncationTooLarge(LogGasError):
    pass


class WindowTooThin(LogGasError):
    pass


class WindowOutsideBulk(LogGasError):
    kind = "validation"


class ResidualTooLarge(LogGasError):
    pass


class UnsupportedMeasure(LogGasError):
    pass


class TooLargeT(LogGasError):
    pass


class InsufficientRange(LogGasError):
    pass


class NonDecayingSpectrum(LogGasError):
    pass
