"""Exception types raised across the package."""


class StagewiseError(Exception):
    """Base class for all package errors."""


class EmptyBatch(StagewiseError, ValueError):
    pass


class MissingPlaceholder(StagewiseError, KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name

    def __str__(self):
        return f"missing placeholder: {self.name}"


class BackendUnavailable(StagewiseError, RuntimeError):
    pass


class MalformedResponse(StagewiseError, ValueError):
    pass


class NonFiniteScore(StagewiseError, ValueError):
    pass


class WrongStage(StagewiseError, ValueError):
    pass


class InstanceTooLarge(StagewiseError, ValueError):
    pass


class InvalidRatio(StagewiseError, ValueError):
    pass


class InvalidBeta(StagewiseError, ValueError):
    pass


class EmptyDataset(StagewiseError, ValueError):
    pass


class DimensionMismatch(StagewiseError, ValueError):
    pass


class ConfigError(StagewiseError, ValueError):
    """Raised when a config fails validation; carries every violation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class ParseError(StagewiseError, ValueError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")
