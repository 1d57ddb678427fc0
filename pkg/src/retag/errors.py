"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class ContractError(ValueError):
    """A caller-facing precondition was violated."""


class ConfigError(ValueError):
    """A configuration value is out of range or internally inconsistent."""


class DataError(ValueError):
    """Input data violates a documented invariant (bad coordinates, bad JSONL, ...)."""


class LengthError(ValueError):
    """A sequence exceeds the configured maximum length."""


class NumericError(ArithmeticError):
    """A computation produced or encountered a non-finite value."""


class FormatError(ValueError):
    """A serialized artifact has a bad magic number or unsupported version."""


class CorruptionError(FormatError):
    """A serialized artifact is structurally damaged (overlapping or truncated regions)."""
