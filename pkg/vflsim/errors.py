"""Exceptions raised by the simulator."""


class VFLSimError(Exception):
    """Base class for every error raised by vflsim."""


class ShapeError(VFLSimError, ValueError):
    """An array does not have the shape an operation requires."""


class DataError(VFLSimError, ValueError):
    """A dataset could not be generated, split or ingested."""


class NumericalError(VFLSimError, ArithmeticError):
    """A gradient or objective stopped being finite."""


class ProtocolError(VFLSimError, RuntimeError):
    """An operation was called in the wrong phase of an experiment."""


class ConfigError(VFLSimError, ValueError):
    """An experiment configuration failed validation.

    ``path`` is the dotted location of the offending field, e.g.
    ``attack.start_round``.
    """

    def __init__(self, path: str, message: str) -> None:
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message
