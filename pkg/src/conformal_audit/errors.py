"""Exception hierarchy. The CLI maps ToolkitError to exit code 2."""


class ToolkitError(Exception):
    """Base class for all data/validation/configuration failures."""


class ParseError(ToolkitError):
    """Malformed input row or undecodable file content."""


class SchemaError(ToolkitError):
    """File structure inconsistent with the declared column schema."""


class ValidationError(ToolkitError):
    """Well-formed input violating a domain invariant (simplex, label range)."""


class NumericError(ToolkitError):
    """Non-finite values where finite reals are required."""


class DataError(ToolkitError):
    """Operation precondition on the data not met (missing fields, empty table)."""


class SplitError(ToolkitError):
    """Calibration/test split cannot satisfy its contract."""


class CalibrationError(ToolkitError):
    """Quantile or temperature fitting failed."""


class AuditError(ToolkitError):
    """Metric computation precondition not met."""


class ConfigError(ToolkitError):
    """Invalid configuration values."""
