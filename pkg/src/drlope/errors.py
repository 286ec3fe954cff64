"""Exception types shared across the package."""

import numpy as np


class IdentifiabilityError(ValueError):
    """Overlap or support condition fails, so the target quantity is not identified."""


class InfeasibleSchemeError(ValueError):
    """A fitting scheme cannot be applied to the given data (too few trajectories or steps)."""


class SingularSystemError(np.linalg.LinAlgError):
    """An estimating-equation system is singular or numerically ill-conditioned."""

    def __init__(self, message, rcond=None, visit_counts=None):
        super().__init__(message)
        self.rcond = rcond
        self.visit_counts = visit_counts


class ParseError(ValueError):
    """Malformed text input; carries the 1-based line and column of the problem."""

    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f"line {line}"
            if column is not None:
                loc += f", column {column}"
            loc += ": "
        super().__init__(loc + message)
        self.line = line
        self.column = column
