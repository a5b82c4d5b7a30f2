"""Exception types raised across the package."""


class DiadError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DiadError, ValueError):
    pass


class ContractError(DiadError, ValueError):
    """A caller violated a shape or argument precondition."""


class SchemaError(DiadError, ValueError):
    pass


class NotHardenedError(DiadError, RuntimeError):
    """Raised when an operation needs an annealed (hard-selection) model."""


class ZeroCountError(DiadError, ZeroDivisionError):
    """A leaf count is zero and no smoothing was requested."""


class UnusableLabelsError(DiadError, ValueError):
    pass


class InsufficientPositivesError(DiadError, ValueError):
    pass


class UndefinedMetricError(DiadError, ValueError):
    pass


class ModelVersionError(DiadError, ValueError):
    pass


class CorruptModelError(DiadError, ValueError):
    pass


class DatasetError(DiadError, ValueError):
    """Problems reading or validating a CSV dataset."""


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class NonNumericCellError(DatasetError):
    pass


class UnknownColumnError(DatasetError, KeyError):
    pass
