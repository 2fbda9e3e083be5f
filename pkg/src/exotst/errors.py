"""Exception hierarchy shared by all modules."""


class ExoTSTError(Exception):
    pass


class ShapeError(ExoTSTError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ExoTSTError, RuntimeError):
    """An operation was called outside its precondition."""


class NumericalError(ExoTSTError, FloatingPointError):
    """A non-finite value was produced."""


class ConfigError(ExoTSTError, ValueError):
    """Invalid hyperparameter combination."""


class DataError(ExoTSTError, ValueError):
    pass


class MissingColumnError(DataError):
    pass


class NonNumericCellError(DataError):
    pass


class TooFewRowsError(DataError):
    pass


class ConstantColumnError(DataError):
    pass


class SeriesTooShortError(DataError):
    pass


class EmptyWindowError(DataError):
    pass


class CheckpointError(ExoTSTError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointCompatibilityError(CheckpointError):
    pass
