"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class FBSError(Exception):
    """Base class for all errors raised by fbsdelta."""


# lattice
class NonPositiveKernel(FBSError, ValueError):
    pass


class BadSimplex(FBSError, ValueError):
    pass


class TreeTooLarge(FBSError, ValueError):
    pass


class MissingChild(FBSError, KeyError):
    pass


class IndexOutOfRange(FBSError, IndexError):
    pass


class LeafNode(FBSError, ValueError):
    pass


class TimeOutOfRange(FBSError, IndexError):
    pass


# bsde
class NotCentered(FBSError, ValueError):
    pass


class DimensionMismatch(FBSError, ValueError):
    pass


class ShapeMismatch(FBSError, ValueError):
    pass


# fbsde / control
class ControlOutOfDomain(FBSError, ValueError):
    pass


class MissingYZ(FBSError, ValueError):
    pass


class NoConvergence(FBSError, RuntimeError):
    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SingularJacobian(FBSError, RuntimeError):
    pass


class InfeasibleDirection(FBSError, ValueError):
    pass


# optimize
class BudgetExceeded(FBSError, RuntimeError):
    def __init__(self, combinations: int, budget: int):
        super().__init__(f"brute force needs {combinations} cost evaluations, budget is {budget}")
        self.combinations = combinations
        self.budget = budget


# cli / io
class ParseError(FBSError, ValueError):
    def __init__(self, line: int | None, message: str):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.message = message


class ValidationError(FBSError, ValueError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class ConfigInvalid(ValidationError):
    """Every validation problem found in a config, not just the first."""

    def __init__(self, errors: list[ValidationError]):
        self.errors = list(errors)
        first = self.errors[0]
        super().__init__(first.field, first.reason)
        self.args = ("; ".join(str(e) for e in self.errors),)


class NodeMismatch(FBSError, ValueError):
    pass
