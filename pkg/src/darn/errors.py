"""Exception hierarchy shared by every module."""


class DarnError(Exception):
    """Base class for all package errors."""

    category = "error"


class DimensionError(DarnError, ValueError):
    category = "dimension"


class ConfigError(DarnError, ValueError):
    category = "config"


class ContractError(DarnError, ValueError):
    category = "contract"


class LabelRangeError(DarnError, ValueError):
    category = "label-range"


class SamplingError(DarnError, ValueError):
    category = "sampling"


class NumericError(DarnError, ArithmeticError):
    category = "numeric"


class BuildError(DarnError, ValueError):
    category = "build"


class ValidationError(DarnError, ValueError):
    category = "validation"


class DatasetIOError(DarnError, OSError):
    """File missing or corrupt; the message always carries the path."""

    category = "io"
