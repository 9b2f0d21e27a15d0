"""Exception types shared across the toolkit."""


class DPSpeechError(Exception):
    """Base class for all toolkit errors."""


class ParameterError(DPSpeechError, ValueError):
    """An argument is outside its documented domain or has the wrong shape."""


class NumericError(DPSpeechError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConsistencyError(DPSpeechError):
    """A cache or state object no longer matches the data it was built from."""


class ContractViolation(DPSpeechError):
    """A caller broke an invariant the callee relies on (e.g. unclipped gradients)."""


class CalibrationError(DPSpeechError):
    """Noise calibration cannot hit the requested privacy budget."""


class FormatError(DPSpeechError):
    """A file on disk does not follow the expected binary/text format."""


class UndefinedMetricError(DPSpeechError):
    """A metric is undefined for the given data (single class, zero variance, ...)."""


class SpecError(DPSpeechError):
    """An experiment or cohort specification is malformed or infeasible."""
