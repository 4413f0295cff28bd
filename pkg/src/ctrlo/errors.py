"""Exception types shared across the package."""


class CtrlOError(Exception):
    pass


class ShapeError(CtrlOError, ValueError):
    """Argument has the wrong shape or an invalid axis."""


class ContractError(CtrlOError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(CtrlOError, ArithmeticError):
    """NaN/Inf or a degenerate value where a finite one is required."""


class GenerationError(CtrlOError, RuntimeError):
    """Procedural generation gave up after its retry budget."""


class FormatError(CtrlOError, ValueError):
    """Malformed dataset or checkpoint file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(FormatError):
    """File parsed fine but a sample violates a data invariant."""

    def __init__(self, message, sample_index=None):
        if sample_index is not None:
            message = f"sample {sample_index}: {message}"
        super().__init__(message)
        self.sample_index = sample_index


class ConfigError(CtrlOError, ValueError):
    pass


class NumericAbort(CtrlOError, RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint path."""

    def __init__(self, message, step=None, checkpoint=None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint
