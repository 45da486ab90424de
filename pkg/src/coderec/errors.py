"""Exception types shared across the package."""


class CoderecError(Exception):
    """Base class for all package-specific errors."""


class ParseError(CoderecError, ValueError):
    """Malformed text input; carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(CoderecError, ValueError):
    """Binary file or container does not match its documented layout."""


class DataError(CoderecError, ValueError):
    """Input values violate a documented contract (NaN, empty corpus, ...)."""


class ConfigError(CoderecError, ValueError):
    """Invalid or inconsistent configuration."""
