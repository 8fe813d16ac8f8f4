"""Exception types shared across the package."""


class FwfmError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(FwfmError, ValueError):
    """Malformed libffm input."""

    def __init__(self, message: str, line_no: int = 0):
        if line_no:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class DuplicateFieldError(ParseError):
    """Two tokens for the same field on one line."""


class ConfigError(FwfmError, ValueError):
    """Invalid configuration value."""


class ContractViolationError(FwfmError, ValueError):
    """An input broke a documented precondition (e.g. feature id out of bounds)."""


class DivergedError(FwfmError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, eta: float):
        super().__init__(
            f"non-finite loss at optimizer step {step} (eta={eta:g}); "
            "reduce the learning rate"
        )
        self.step = step
        self.eta = eta


class UndefinedMetricError(FwfmError, ValueError):
    """A metric is undefined on the given input (e.g. single-class AUC)."""
