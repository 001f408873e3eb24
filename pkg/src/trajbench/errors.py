"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, numeric failures exit 3.
"""


class TrajBenchError(Exception):
    """Base class for all package errors."""


class DimensionError(TrajBenchError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(TrajBenchError, ValueError):
    """An operation argument is outside its valid range."""


class ContractError(TrajBenchError, RuntimeError):
    """A caller violated an operation's precondition."""


class NonFiniteError(TrajBenchError, ArithmeticError):
    """A NaN or Inf was produced or supplied."""

    def __init__(self, where: str, detail: str = ""):
        self.where = where
        msg = f"non-finite values in {where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ConfigError(TrajBenchError, ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(TrajBenchError, ValueError):
    """Input file does not follow the expected layout."""


class DataError(TrajBenchError, ValueError):
    """Input content is well-formed but semantically invalid."""


class RangeError(TrajBenchError, ValueError):
    """A requested index (e.g. a horizon mark) is out of range."""


class TrainingDiverged(NonFiniteError):
    """Loss became non-finite during training.

    ``last_good`` holds the parameters from before the failing step.
    """

    def __init__(self, batch_index: int, step: int, last_good):
        self.batch_index = batch_index
        self.step = step
        self.last_good = last_good
        super().__init__("training loss", f"step {step}, batch {batch_index}")
