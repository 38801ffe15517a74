"""Exception hierarchy. CLI exit codes hang off these classes."""


class RiskgridError(Exception):
    exit_code = 1


class ShapeError(RiskgridError, ValueError):
    """Array dimensions do not agree."""
    exit_code = 4


class ContractError(RiskgridError, RuntimeError):
    """An API precondition was violated by the caller."""
    exit_code = 4


class ConfigurationError(RiskgridError, ValueError):
    exit_code = 2


class DataError(RiskgridError, ValueError):
    """Bad input data; carries the row/column location when known."""
    exit_code = 3

    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class StratificationError(DataError):
    pass


class TrainingError(RiskgridError, RuntimeError):
    exit_code = 3

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"{message} at epoch {epoch}"
        super().__init__(message)
        self.epoch = epoch


class CompatibilityError(RiskgridError):
    """Checkpoint and data or model capabilities do not match."""
    exit_code = 4


class UnsupportedModelError(CompatibilityError):
    pass


class ExplanationError(RiskgridError, ValueError):
    exit_code = 2
