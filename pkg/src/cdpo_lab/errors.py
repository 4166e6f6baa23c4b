"""Shared exception types."""


class CapabilityError(TypeError):
    """An operation was requested from a model family that cannot provide it
    (e.g. an exact log-density from an implicit-density model)."""


class NumericalGuardError(ArithmeticError):
    """A numerical guard tripped (non-finite intermediate, log of zero with a
    mismatched label, degenerate configuration)."""


class FrozenModelError(RuntimeError):
    """A parameter-mutating entry point was called on a frozen model."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
