"""Exception and warning classes raised across the package."""


class EcgIcdError(Exception):
    """Base class for all package errors."""


class DataError(EcgIcdError, ValueError):
    """Validation or data problem (CLI exit code 1)."""


class MalformedCode(DataError):
    pass


class UnmappableIcd9(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class OutOfRange(DataError):
    pass


class EmptyLabelSet(DataError):
    pass


class EmptySignal(DataError):
    pass


class ScenarioParseError(DataError):
    pass


class UnknownRecord(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ShapeMismatch(DataError):
    pass


class RecordTooShort(DataError):
    pass


class LabelSetMismatch(DataError):
    pass


class AllUndefined(DataError):
    """No label had both classes present, so macro AUROC is undefined."""


class EmptySplit(DataError):
    pass


class NonFiniteGradient(EcgIcdError, FloatingPointError):
    pass


class NonFiniteUpdate(EcgIcdError, FloatingPointError):
    pass


class Diverged(EcgIcdError, FloatingPointError):
    pass


class CheckpointError(DataError):
    pass


class ConfigError(EcgIcdError):
    """Invalid or unreadable run configuration (CLI exit code 2)."""


class UnstablePoleWarning(RuntimeWarning):
    pass


class BadLengthWarning(RuntimeWarning):
    pass


class OverlappingIntervalsWarning(RuntimeWarning):
    pass
