"""Exception hierarchy shared by all modules."""


class GFFError(Exception):
    """Base class for errors raised by this package."""


class DomainError(GFFError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ConfigurationError(GFFError, ValueError):
    """Invalid or inconsistent configuration (workspace, padding, radii)."""


class CapacityError(ConfigurationError):
    """A requested object exceeds a configured size limit."""


class NumericError(GFFError, ArithmeticError):
    """A numerical routine failed to reach its accuracy contract."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        extra = ", ".join(f"{k}={v!r}" for k, v in self.diagnostics.items())
        return f"{base} ({extra})"
