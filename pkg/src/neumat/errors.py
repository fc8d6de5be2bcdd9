"""Exception types shared across the package."""


class NeumatError(Exception):
    """Base class for all package errors."""


class InputError(NeumatError):
    """A caller-supplied value violates a documented precondition."""


class FormatError(NeumatError):
    """A serialized artifact is malformed or inconsistent with its manifest."""


class FitDivergenceError(NeumatError):
    """Optimization produced non-finite parameters; carries iteration context."""

    def __init__(self, message: str, iteration: int = -1, frame: int = -1):
        super().__init__(message)
        self.iteration = iteration
        self.frame = frame
