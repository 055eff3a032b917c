class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values."""

    def __init__(self, message, *, layer=None, step=None):
        super().__init__(message)
        self.layer = layer
        self.step = step


class CheckpointMismatch(RuntimeError):
    """The checkpoint's config digest does not match the requested config."""
