"""Exception taxonomy shared across the package."""


class GazeSsmError(Exception):
    """Base class for all package errors."""


class ShapeError(GazeSsmError):
    """Operand shapes or dtypes are incompatible."""


class DomainError(GazeSsmError):
    """Input lies outside an operation's numeric domain."""


class NumericError(GazeSsmError):
    """A computation produced NaN or Inf."""


class ContractError(GazeSsmError):
    """An API precondition was violated."""


class ConfigError(GazeSsmError):
    """A configuration value is out of its allowed range."""


class SchemaError(GazeSsmError):
    """A CSV file does not match its declared schema profile."""


class EmptyRecordingError(GazeSsmError):
    """A recording file contains no data rows."""


class CorruptionError(GazeSsmError):
    """Serialized data is inconsistent with its manifest."""


class ProtocolError(GazeSsmError):
    """A cross-validation protocol cannot be constructed."""


class DegenerateFoldError(GazeSsmError):
    """A fold's training data cannot support training (e.g. single class)."""
