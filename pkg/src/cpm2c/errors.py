"""Exception hierarchy shared across the package.

The CLI maps these families onto exit codes: config/usage problems,
data problems, and numerical failures are distinguishable by class.
"""


class ConfigError(ValueError):
    """Invalid configuration value (negative weight, bad flag combination)."""


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(ValueError):
    """Input outside an operation's numeric domain (log of non-positive,
    division by zero, NaN where finiteness is required)."""


class GraphError(RuntimeError):
    """Misuse of the differentiation tape (non-scalar loss, detached tensor)."""


class DataError(ValueError):
    """Base class for dataset and file-format problems."""


class ManifestError(DataError):
    """Manifest failed validation; message lists the offending records."""


class ProtocolError(DataError):
    """Episode protocol cannot be satisfied by the available data."""


class CheckpointError(DataError):
    """Checkpoint unreadable or incompatible with the configured model."""


class NumericalError(RuntimeError):
    """Numerical failure during training or checking (NaN loss, gradient
    check violation)."""
