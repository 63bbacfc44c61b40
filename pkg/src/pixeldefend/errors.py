"""Exception hierarchy shared by every subpackage."""


class PixelDefendError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PixelDefendError, ValueError):
    """Shapes, axes or positions are incompatible."""


class ContractError(PixelDefendError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(PixelDefendError, ArithmeticError):
    """A NaN or infinity appeared in a forward or backward pass."""


class ConfigurationError(PixelDefendError, ValueError):
    pass


class FormatError(PixelDefendError, ValueError):
    """A binary file does not follow its declared format."""


class ConsistencyError(PixelDefendError, ValueError):
    pass


class TrainingError(PixelDefendError, RuntimeError):
    pass


class StatisticsError(PixelDefendError, ValueError):
    pass


class InputError(PixelDefendError, ValueError):
    pass


class StageError(PixelDefendError, RuntimeError):
    """An experiment stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
