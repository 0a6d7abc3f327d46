"""
VlasovFlow Errors
Exception hierarchy shared by the engine, the IO layer and the CLI.
"""

from typing import Optional


class VlasovFlowError(Exception):
    """Base class for every error raised by VlasovFlow."""

    exit_code = 1


class ConfigurationError(VlasovFlowError, ValueError):
    """Invalid run configuration, unsupported dimension, unknown registry id."""

    exit_code = 3


class InputError(VlasovFlowError, ValueError):
    """Invalid data handed to an operation (negative densities, mismatched runs, ...)."""

    exit_code = 4


class GridRangeError(InputError):
    """Phase-space mass reached the edge of the velocity grid; enlarge the grid."""


class SingularityError(VlasovFlowError, ArithmeticError):
    """Evaluation of a singular kernel at its pole."""

    exit_code = 4


class NumericalFaultError(VlasovFlowError, ArithmeticError):
    """Non-finite state encountered while stepping."""

    exit_code = 5

    def __init__(self, message: str, step: Optional[int] = None, t: Optional[float] = None):
        super().__init__(message)
        self.step = step
        self.t = t


class StepRejectedError(NumericalFaultError):
    """Sphere integration could not keep the renormalization correction small."""
