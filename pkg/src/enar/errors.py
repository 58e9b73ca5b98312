"""Shared exception types."""


class EnarError(Exception):
    pass


class ShapeError(EnarError, ValueError):
    """An operation received tensors with incompatible dimensions."""


class ConfigError(EnarError, ValueError):
    """A config value or config file is invalid."""


class UnsupportedOracleError(EnarError, ValueError):
    """The oracle does not provide what the operation needs (density, score, ...)."""


class InputError(EnarError, ValueError):
    """Runtime data (labels, masks, token arrays) violates a precondition."""


class NumericalAbort(EnarError, RuntimeError):
    """Training hit a non-finite loss or gradient and was aborted.

    Carries enough context to name the offending step.
    """

    def __init__(self, message, step=None, epoch=None, batch_index=None):
        super().__init__(message)
        self.step = step
        self.epoch = epoch
        self.batch_index = batch_index
