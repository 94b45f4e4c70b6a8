"""
Error hierarchy shared by the trajectory and ensemble packages.
"""
from typing import List, Optional


class CGLError(Exception):
    """Root of every error raised by this project."""


class GridMismatchError(CGLError, ValueError):
    """Fields on different grids, size mismatches or misaligned times."""


class DomainError(CGLError, ValueError):
    """A parameter lies outside the range its operation accepts."""


class PreconditionError(DomainError):
    """A structural precondition of an operation is violated."""


class BlowUpError(CGLError, RuntimeError):
    """The integrated field left the admissible region."""

    def __init__(self, step: int, norm: float, message: Optional[str] = None):
        self.step = step
        self.norm = norm
        super().__init__(message or f"blow-up at step {step}: ||u|| = {norm:.6g}")


class ConfigError(CGLError, ValueError):
    """Configuration text failed validation; carries every violation found."""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
