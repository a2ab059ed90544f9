"""This module contains the exceptions raised by vqforge.

All of them derive from `VqForgeError` so the command line can map a whole family
to one exit code.
"""
from typing import Optional


class VqForgeError(Exception):
    """Base class for every error raised by this package."""


class ContractViolationError(VqForgeError):
    """Two cooperating objects disagree on a shape or dimension."""


class InputError(VqForgeError):
    """User supplied data cannot be processed.

    Attributes:
        row: Index of the offending row, if the error concerns one row of a matrix.
    """

    def __init__(self, message: str, row: Optional[int] = None):
        super().__init__(message)
        self.row = row


class ParseError(InputError):
    """A binary file or image could not be parsed.

    Attributes:
        offset: Byte offset in the file where parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ConfigError(VqForgeError):
    """Invalid configuration value or unknown option."""


class InfeasibleBudgetError(ConfigError):
    """The requested capacity matching has no integer solution, or a budget is violated.

    Attributes:
        constraint: Name of the violated constraint.
        quantity: Name of the quantity that could not be matched.
    """

    def __init__(self, constraint: str, quantity: str, detail: str):
        super().__init__(f"{constraint} violated for {quantity}: {detail}")
        self.constraint = constraint
        self.quantity = quantity


class TrainingDivergenceError(VqForgeError):
    """The training loss became non-finite.

    Attributes:
        step: Index of the step that produced the non-finite loss.
    """

    def __init__(self, step: int, detail: str = ""):
        message = f"training diverged at step {step}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
        self.step = step
