"""Exception hierarchy shared by all modules."""


class CoreReftError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CoreReftError, ValueError):
    """Operands have incompatible shapes."""


class EmptyInputError(CoreReftError, ValueError):
    pass


class DivergenceError(CoreReftError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


class FrozenParameterError(CoreReftError, RuntimeError):
    pass


class StaleTapeError(CoreReftError, RuntimeError):
    pass


class CheckpointError(CoreReftError, ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class DataFormatError(CoreReftError, ValueError):
    """Base for file-format problems in dataset loaders."""


class BadMagicError(DataFormatError):
    pass


class RaggedRowError(DataFormatError):
    pass


class NonNumericCellError(DataFormatError):
    pass


class ConfigError(CoreReftError, ValueError):
    pass


class UnknownTaskError(CoreReftError, KeyError):
    pass
