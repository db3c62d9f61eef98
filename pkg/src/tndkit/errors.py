"""Exception hierarchy shared across tndkit.

Errors are grouped by what the CLI should do with them: configuration
problems, data problems and numerical failures map to distinct exit codes.
"""


class TndError(Exception):
    """Base class for every error raised by tndkit."""

    exit_code = 1


class ConfigError(TndError):
    exit_code = 2


class DataError(TndError):
    exit_code = 3


class NumericalError(TndError):
    exit_code = 4


class EmptyDataset(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class DegenerateArm(DataError):
    """A required stratum (cases, controls, or a vaccination arm) is empty."""

    def __init__(self, margin, where=None):
        self.margin = margin
        self.where = where
        msg = margin if where is None else f"{margin} ({where})"
        super().__init__(msg)


class SchemaError(DataError):
    pass


class InvalidFoldCount(ConfigError):
    pass


class InsufficientSample(DataError):
    def __init__(self, available, requested):
        self.available = available
        self.requested = requested
        super().__init__(
            f"only {available} sampled (S=1) rows available, {requested} requested"
        )


class DegenerateTruth(NumericalError):
    pass


class ZeroDenominator(NumericalError):
    def __init__(self, event):
        self.event = event
        super().__init__(f"conditioning event has probability 0: {event}")


class NoConvergence(NumericalError):
    """Iterative fit stopped before meeting its tolerance.

    ``result`` holds the last iterate so callers can decide whether to use it.
    """

    def __init__(self, message, result=None):
        self.result = result
        super().__init__(message)


class SingularHessian(NumericalError):
    pass


class DegenerateLabels(NumericalError):
    pass


class DegenerateDenominator(NumericalError):
    pass


class NonPositiveEstimate(NumericalError):
    pass


class TruthResolutionFailed(NumericalError):
    pass
