"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MvmcadError(Exception):
    exit_code = 1


class ValidationError(MvmcadError, ValueError):
    exit_code = 2


class DimensionError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class ContractError(ValidationError):
    pass


class DatasetIntegrityError(ValidationError):
    pass


class MetricDomainError(ValidationError):
    pass


class NumericError(MvmcadError, ArithmeticError):
    exit_code = 3


class StorageError(MvmcadError, OSError):
    exit_code = 4
