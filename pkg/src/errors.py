"""
Errors - Exception hierarchy shared by the discretization, solver and CLI layers
"""

from typing import Any, Dict, Optional


class StokesOptCtrlError(Exception):
    """Base class for every error raised by this package"""


class InvalidArgumentError(StokesOptCtrlError, ValueError):
    """A caller passed a value outside an operation's precondition"""


class SolverError(StokesOptCtrlError, RuntimeError):
    """Base class for numerical failures (exit status 3 in the CLI)"""


class SolverFailureError(SolverError):
    """The sparse factorization broke down"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConvergenceFailureError(SolverError):
    """A solve finished but its residual is above tolerance"""

    def __init__(self, message: str, residual: float, tol: float):
        super().__init__(message)
        self.residual = residual
        self.tol = tol


class IterationFailureError(SolverError):
    """The active-set iteration hit its iteration cap"""

    def __init__(self, message: str, iterations: int, last_change: int):
        super().__init__(message)
        self.iterations = iterations
        self.last_change = last_change


class LevelFailureError(SolverError):
    """A solver failure raised inside a refinement loop, tagged with its level"""

    def __init__(self, message: str, level: int):
        super().__init__(message)
        self.level = level
