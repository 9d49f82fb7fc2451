"""Exception hierarchy shared across the package."""


class MMTSViTError(Exception):
    """Base class for all package errors."""


class ShapeError(MMTSViTError):
    """Operand shapes violate an operation's shape rules."""


class ConfigError(MMTSViTError):
    """Invalid or inconsistent configuration."""


class DataError(MMTSViTError):
    """Input data violates a documented data contract."""


class FusionError(MMTSViTError):
    """Modalities cannot be fused as requested."""


class ParseError(MMTSViTError):
    """A file could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(MMTSViTError):
    """An API precondition was violated by the caller."""
