"""Exception types shared across the package."""


class MincamError(Exception):
    """Base class for all package errors."""


class DimensionError(MincamError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(MincamError, ValueError):
    """A configuration value violates its documented constraints."""


class ContractError(MincamError, RuntimeError):
    """An API precondition was violated by the caller."""


class FormatError(MincamError, ValueError):
    """A file does not follow its documented binary layout."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DataError(MincamError, RuntimeError):
    """A required dataset is missing or unreadable."""


class DivergenceError(MincamError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
