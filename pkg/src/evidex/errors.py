"""Exception types shared across the package."""


class EvidexError(Exception):
    """Base class for all package errors."""


class InputError(EvidexError):
    """An argument violates an operation's preconditions."""


class NumericDomainError(EvidexError):
    """A tensor contains NaN or Inf where finite values are required."""


class UsageError(EvidexError):
    """An API was driven in an unsupported order (e.g. tape reused)."""


class ConfigError(EvidexError):
    """A configuration is structurally invalid."""


class FormatError(EvidexError):
    """A serialized artifact is corrupt or has the wrong format."""


class DatasetStructureError(EvidexError):
    """The labeled dataset cannot support the requested operation."""


class TrainingDiverged(EvidexError):
    """Training produced a non-finite loss and was aborted."""
