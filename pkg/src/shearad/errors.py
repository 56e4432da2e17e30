class ValidationError(ValueError):
    """Raised when an input violates a documented precondition or invariant."""


class ManifestError(ValidationError):
    """Malformed, inconsistent or incomplete dataset manifest."""
