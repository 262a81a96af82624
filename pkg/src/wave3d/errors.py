"""Exception types shared across the package."""


class Wave3dError(Exception):
    """Base class for all package errors."""

    kind = "error"

    def record(self):
        """Machine-readable description used by the CLI."""
        return {"error": self.kind, "message": str(self)}


class ParameterError(Wave3dError, ValueError):
    kind = "parameter"


class DomainError(Wave3dError, ValueError):
    kind = "domain"


class ValidationError(Wave3dError, ValueError):
    kind = "validation"


class ConfigurationError(Wave3dError, ValueError):
    kind = "configuration"


class InsufficientDataError(Wave3dError, ValueError):
    kind = "insufficient_data"


class ContractionError(Wave3dError, RuntimeError):
    kind = "non_contraction"


class NumericalBlowupError(Wave3dError, FloatingPointError):
    kind = "numerical_blowup"

    def __init__(self, step, message=None):
        self.step = int(step)
        super().__init__(message or f"non-finite field values at step {self.step}")

    def record(self):
        rec = super().record()
        rec["step"] = self.step
        return rec
