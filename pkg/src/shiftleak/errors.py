"""Exception types raised across the package."""


class ShiftLeakError(Exception):
    """Base class for all package errors."""


class InputShapeError(ShiftLeakError, ValueError):
    pass


class LabelError(ShiftLeakError, ValueError):
    pass


class LayoutError(ShiftLeakError, ValueError):
    pass


class EmptyDataError(ShiftLeakError, ValueError):
    pass


class FormatError(ShiftLeakError, ValueError):
    """Malformed or truncated binary/text input."""


class ConsistencyError(ShiftLeakError, ValueError):
    pass


class SchemaError(ShiftLeakError, ValueError):
    pass


class SizeError(ShiftLeakError, ValueError):
    pass


class InsufficientSamplesError(ShiftLeakError, ValueError):
    pass


class DegenerateFederationError(ShiftLeakError, ValueError):
    pass


class UndefinedSimilarityError(ShiftLeakError, ArithmeticError):
    """Cosine similarity requested for a zero-norm vector."""


class NormalizationError(ShiftLeakError, ArithmeticError):
    pass


class MomentUndefinedError(ShiftLeakError, ValueError):
    pass


class TimelineError(ShiftLeakError, RuntimeError):
    """Observer called out of order or without the state it needs."""


class WindowError(ShiftLeakError, ValueError):
    """Not enough history to fit a trend."""


class ConfigError(ShiftLeakError, ValueError):
    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DatasetMissingError(ShiftLeakError, FileNotFoundError):
    pass
