class ValidationError(ValueError):
    """Bad input shape, value range or configuration."""


class TrainingAbort(RuntimeError):
    """Raised when a loss component becomes non-finite during training."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
