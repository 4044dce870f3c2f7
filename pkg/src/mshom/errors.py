"""Exception hierarchy shared by all solver stages."""

from __future__ import annotations


class MshomError(Exception):
    """Base class for every error raised by the package."""


class InvalidArgumentError(MshomError, ValueError):
    pass


class AssemblyError(MshomError):
    def __init__(self, message: str, element: int | None = None):
        super().__init__(message)
        self.element = element


class OutOfDomainError(MshomError, ValueError):
    pass


class MisalignmentError(MshomError, ValueError):
    """Inclusion faces do not fall on mesh grid planes."""


class StencilError(MshomError, ValueError):
    pass


class ConfigError(MshomError, ValueError):
    pass


class ConvergenceError(MshomError, RuntimeError):
    """An iterative procedure hit its cap; carries the last residual(s)."""

    def __init__(self, message: str, residual: float | None = None, history=None):
        super().__init__(message)
        self.residual = residual
        self.history = list(history) if history is not None else []


class SCFDivergenceError(ConvergenceError):
    pass


class CouplingDivergenceError(ConvergenceError):
    def __init__(self, message: str, step: int, residual=None, history=None):
        super().__init__(message, residual, history)
        self.step = step


class DofCapError(MshomError, ValueError):
    """Mesh exceeds the configured degree-of-freedom cap."""


class OutputError(MshomError, OSError):
    """A result file could not be written."""
