"""Shared exception types."""


class ShapeError(ValueError):
    """Tensor/box dimensions do not satisfy an operation's contract."""


class DataError(ValueError):
    """Input records are malformed or semantically invalid."""


class FormatError(ValueError):
    """A serialized file does not match its expected layout."""


class TrainingError(RuntimeError):
    """Optimization cannot proceed (e.g. non-finite gradients)."""
