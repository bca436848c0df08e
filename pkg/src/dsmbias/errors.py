"""Exception types shared across the package."""


class DsmBiasError(Exception):
    """Base class for errors raised by dsmbias."""


class InvalidArgument(DsmBiasError, ValueError):
    """Inputs violate a documented precondition (shape, sign, membership)."""


class Unsupported(DsmBiasError, NotImplementedError):
    """The requested route exists in principle but not for this input."""


class DivergenceError(DsmBiasError, RuntimeError):
    """Training loss crossed the divergence guard."""

    def __init__(self, message: str, step: int, loss: float):
        super().__init__(message)
        self.step = step
        self.loss = loss
