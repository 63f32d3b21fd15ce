"""Exception hierarchy shared by every module, and the CLI exit codes they map to."""

from typing import Dict, Optional

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


class LabError(Exception):
    """Base class for all errors raised by the lab."""


class ContractError(LabError, ValueError):
    """Inputs violate an operation's preconditions (shapes, ranges)."""


class ModeError(ContractError):
    """PhiNet-only operation called in SimSiam mode, or the reverse."""


class UnsupportedParameterError(ContractError):
    """Parameter value outside what the operation can handle (e.g. rho = 0)."""


class ConfigError(ContractError):
    """Invalid run configuration: unknown keys, empty grids, too coarse resolution."""


class AssumptionError(ContractError):
    """A modelling assumption the operation relies on does not hold."""


class NumericError(LabError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DivergenceError(NumericError):
    """An integration or training run left the finite, bounded region."""

    def __init__(self, message: str, last_finite_step: int, diagnostics: Optional[Dict] = None):
        super().__init__(f"{message} (last finite step: {last_finite_step})")
        self.last_finite_step = last_finite_step
        self.diagnostics = diagnostics or {}


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit status."""
    if isinstance(error, NumericError):
        return EXIT_DIVERGENCE
    if isinstance(error, ValueError):
        return EXIT_VALIDATION
    if isinstance(error, OSError):
        return EXIT_IO
    return 1
