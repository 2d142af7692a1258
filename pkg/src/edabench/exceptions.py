class EdaError(Exception):
    """Base class for all errors raised by edabench."""


class StreamError(EdaError, ValueError):
    pass


class MaskingViolation(EdaError):
    pass


class NonMonotoneArrival(EdaError, ValueError):
    pass


class InvalidProfile(EdaError, ValueError):
    pass


class ParseError(EdaError, ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class DimensionMismatch(ParseError):
    pass


class UnknownLabel(EdaError, ValueError):
    pass


class EmptySource(EdaError, ValueError):
    pass


class NoTargets(EdaError, ValueError):
    pass


class TooSmall(EdaError, ValueError):
    pass


class EmptyInput(EdaError, ValueError):
    pass


class LengthMismatch(EdaError, ValueError):
    pass


class DegenerateDenominator(EdaError, ZeroDivisionError):
    pass


class ConstantInput(EdaError, ValueError):
    pass


class DegenerateBandwidth(EdaError, ValueError):
    pass


class TooFewSamples(EdaError, ValueError):
    pass


class ConfigError(EdaError, ValueError):
    pass


class DegenerateTrainSetWarning(UserWarning):
    pass


class MissingLabels(EdaError, ValueError):
    """Class-conditional analysis requested on domains without gold labels."""
