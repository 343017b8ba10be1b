"""Exception hierarchy shared by all fedimpute modules."""


class FedimputeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FedimputeError):
    """Array shapes or parameter layouts are incompatible."""


class DataError(FedimputeError):
    """Input data violates a precondition (non-finite values, empty rows)."""


class NumericError(FedimputeError):
    """A computation produced non-finite or otherwise unusable numbers."""


class UsageError(FedimputeError):
    """An API was called in an unsupported way (e.g. foreign tape node)."""


class ConfigError(FedimputeError):
    """A configuration value is out of range or inconsistent."""


class CalibrationError(FedimputeError):
    """An iterative calibration (e.g. mask-rate bisection) failed to converge."""


class IngestionError(FedimputeError):
    """A file could not be parsed into the expected tabular form."""


class EvaluationError(FedimputeError):
    """A score is undefined for the given inputs (empty or degenerate slice)."""


class ProtocolError(FedimputeError):
    """A federated exchange violated the protocol contract."""
