"""Shared exception types."""


class ValidationError(ValueError):
    """Raised when inputs violate a documented contract (bad shapes, weights, configs)."""


class DatasetError(RuntimeError):
    """Raised for unreadable, truncated, or version-incompatible dataset files."""


class CheckpointError(RuntimeError):
    """Raised for corrupt checkpoints or config-hash mismatches on load."""
