"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An operation received tensors whose shapes violate its contract."""


class ContractError(RuntimeError):
    """An operation was used outside its documented contract.

    Examples: calling backward on a non-scalar, recording to a tape that
    is not active, differentiating through an inference-mode pass that
    was never taped.
    """


class CheckpointError(RuntimeError):
    """Base class for checkpoint serialization failures."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint file declares an unsupported format version."""


class CheckpointFormatError(CheckpointError):
    """The checkpoint file is truncated, corrupt, or not a checkpoint."""


class CheckpointMismatchError(CheckpointError):
    """The checkpoint's parameter set does not match the model being loaded."""


class DataError(RuntimeError):
    """A dataset manifest or one of its referenced files is unusable."""


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss value."""


class NonFiniteGradientError(RuntimeError):
    """Training produced a NaN or infinite gradient; the message names the parameter."""
