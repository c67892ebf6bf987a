"""Exception hierarchy shared by every module.

The CLI maps these onto exit statuses; library callers can catch
``CosalError`` for anything raised on purpose.
"""


class CosalError(Exception):
    exit_status = 1


class ConfigurationError(CosalError):
    """Bad or inconsistent configuration: checkpoints, config keys, backbones."""

    exit_status = 2


class IngestionError(CosalError):
    """Input data is missing or malformed."""

    exit_status = 3


class ShapeError(CosalError, ValueError):
    pass


class PreconditionError(CosalError, ValueError):
    pass


class ContractError(CosalError, ValueError):
    pass


class NumericError(CosalError, ArithmeticError):
    pass


class TrainingDivergedError(NumericError):
    pass
