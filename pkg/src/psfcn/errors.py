"""Exception hierarchy. The CLI maps these onto exit codes 1/2/3."""


class PSFCNError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ShapeError(PSFCNError, ValueError):
    """Operand shapes are incompatible.

    ``dims`` maps a dimension name to the pair of values that disagree.
    """

    def __init__(self, message, dims=None):
        self.dims = dict(dims or {})
        if self.dims:
            detail = ", ".join(f"{k}: {a} vs {b}" for k, (a, b) in self.dims.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class ValidationError(PSFCNError, ValueError):
    """An argument violates an operation's precondition."""


class DataError(PSFCNError):
    """Malformed or inconsistent on-disk data."""

    exit_code = 2


class CheckpointError(DataError):
    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)


class NumericalError(PSFCNError):
    """Divergence, rank deficiency or another numerical failure."""

    exit_code = 3


class LightsCoplanarError(NumericalError):
    pass
