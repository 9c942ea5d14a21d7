"""Exception hierarchy shared by every workbench module."""


class QecwError(Exception):
    """Base class for all workbench errors."""

    exit_code = 1


class InvalidParameterError(QecwError, ValueError):
    exit_code = 2


class ConfigError(QecwError):
    exit_code = 2


class FormatError(QecwError):
    """Malformed dataset or checkpoint file."""

    exit_code = 2


class ShapeError(QecwError, ValueError):
    exit_code = 2


class DecompositionError(QecwError):
    """A fault mechanism could not be split into graphlike pieces."""


class CapacityError(QecwError):
    """Too many defects for the exact matcher."""

    exit_code = 3


class InfeasibleDecodeError(QecwError):
    exit_code = 3


class NumericalError(QecwError, FloatingPointError):
    """NaN/Inf encountered in a forward, backward or training step."""

    exit_code = 4


class GraphConsumedError(QecwError, RuntimeError):
    pass
