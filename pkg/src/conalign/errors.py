"""Exception types shared across the package."""


class ValidationError(ValueError):
    """An input violates a documented invariant."""


class DomainError(ValueError):
    """A geometric operation is undefined for its arguments (e.g. antipodal points)."""


class DiffeomorphismError(ValidationError):
    """A warp is not orientation preserving / monotone at some node."""

    def __init__(self, message, nodes=None):
        super().__init__(message)
        self.nodes = nodes


class ResourceError(RuntimeError):
    """Requested grid would exceed the configured memory guard."""
