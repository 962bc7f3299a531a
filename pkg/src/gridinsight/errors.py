"""Shared exception types."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class DecodeError(Exception):
    """A persisted artifact (checkpoint, dataset archive) could not be decoded."""


class TrainingDiverged(RuntimeError):
    """Training aborted because the loss became non-finite."""
