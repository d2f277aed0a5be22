"""Exception hierarchy shared across the package."""


class DenseFlowError(Exception):
    """Base class for all library errors."""


class ShapeError(DenseFlowError, ValueError):
    """Tensor extents incompatible with the requested operation."""


class NumericDomainError(DenseFlowError, ValueError):
    """An op was evaluated outside its valid domain (log of non-positive,
    divide by zero, overflow to non-finite)."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"numeric domain violation in '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ConfigError(DenseFlowError, ValueError):
    """Invalid or infeasible configuration."""


class DataFormatError(DenseFlowError, ValueError):
    """Malformed dataset / checkpoint / config file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(DenseFlowError, RuntimeError):
    """Training diverged or hit a non-finite gradient.

    Carries the last good checkpoint bytes when one exists so the run
    can be resumed from a healthy state.
    """

    def __init__(self, message, stage=None, last_checkpoint=None):
        if stage:
            message = f"{message} [stage: {stage}]"
        super().__init__(message)
        self.stage = stage
        self.last_checkpoint = last_checkpoint


class NumericError(DenseFlowError, RuntimeError):
    """Non-finite value surfaced during model evaluation."""

    def __init__(self, stage, min_scale=None):
        msg = f"non-finite values at stage '{stage}'"
        if min_scale is not None:
            msg += f" (min |s| over 1x1 convolutions: {min_scale:.3e})"
        super().__init__(msg)
        self.stage = stage
        self.min_scale = min_scale


class NotFittedError(DenseFlowError, ValueError, AttributeError):
    """Estimator used before calling fit.

    Subclasses ValueError and AttributeError so scikit-learn tooling that
    catches its own NotFittedError keeps working by duck type.
    """
