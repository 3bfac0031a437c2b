"""Exception hierarchy shared by every module.

CLI exit codes hang off the class: callers catching ``AldenError`` can
``sys.exit(err.exit_code)`` without a lookup table.
"""


class AldenError(Exception):
    exit_code = 1


class InvalidArgumentError(AldenError, ValueError):
    exit_code = 2


class ConfigError(AldenError, ValueError):
    exit_code = 2


class DataLoadError(AldenError):
    exit_code = 1


class ShapeMismatchError(AldenError, ValueError):
    exit_code = 2


class NumericError(AldenError, ArithmeticError):
    exit_code = 3


class NonFiniteLossError(NumericError):
    def __init__(self, term: str, value: float, iteration: int | None = None):
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite loss term '{term}' = {value!r}{where}")
        self.term = term
        self.value = value
        self.iteration = iteration


class BackboneLoadError(AldenError):
    exit_code = 4


class CheckpointError(AldenError):
    exit_code = 4


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    def __init__(self, expected: int, found: int):
        super().__init__(f"checkpoint version mismatch: expected {expected}, found {found}")
        self.expected = expected
        self.found = found


class OutputCollisionError(AldenError):
    exit_code = 5
