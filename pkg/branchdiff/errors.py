"""
Exception hierarchy for branchdiff
Every failure raised by the library derives from BranchDiffError
"""

from typing import Optional


class BranchDiffError(Exception):
    """Base class for all branchdiff errors"""


class DomainError(BranchDiffError, ValueError):
    """Argument outside the domain of an operation"""


class ModelError(BranchDiffError, ValueError):
    """Invalid model object (rate matrix, transition matrix, discrete model)"""


class ConfigError(BranchDiffError, ValueError):
    """Malformed run configuration, flag or grid spec"""


class NumericalError(BranchDiffError, RuntimeError):
    """Numerical failure: singular system, non-convergent series"""


class ConvergenceError(NumericalError):
    """Iterative solver exhausted its iteration cap"""

    def __init__(self, message: str, iterations: int, residual: Optional[float] = None):
        super().__init__(f"{message} (iterations={iterations}, residual={residual:.3e})"
                         if residual is not None else f"{message} (iterations={iterations})")
        self.iterations = iterations
        self.residual = residual


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the CLI exit code: 1 numerical, 2 configuration"""
    if isinstance(error, NumericalError):
        return 1
    if isinstance(error, (ConfigError, DomainError, ModelError)):
        return 2
    return 1
