"""Exception types shared across the package."""


class BalignError(Exception):
    """Base class for all package-specific errors."""


class SingularFitError(BalignError):
    """A transform fit hit a degenerate/singular configuration."""


class NotInvertibleError(BalignError):
    """A warp grid could not be inverted at the requested point."""


class DegenerateInputError(BalignError):
    """Numerically degenerate input (zero-norm row, zero normalizer, ...)."""


class EmptySelectionError(BalignError):
    """A dataset selection matched no samples."""


class PoseOutOfBoundsError(BalignError):
    """Signal that a sampled pose pushed landmarks out of the safe frame."""


class OptimizerStateError(BalignError):
    """Optimizer invoked with missing or inconsistent state."""


class NanLossError(BalignError):
    """Training produced a non-finite loss term."""

    def __init__(self, epoch, term, value):
        super().__init__(f"non-finite loss at epoch {epoch}: {term} = {value}")
        self.epoch = epoch
        self.term = term
        self.value = value
