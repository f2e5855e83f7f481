"""Exception types shared across the package."""

from __future__ import annotations


class InvalidArgumentError(ValueError):
    """An argument is outside the operation's domain (bad shape, id, index)."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value.

    ``layer`` is the index of the network layer whose output first went
    non-finite, when the failure happened inside an MLP.
    """

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


class UnsupportedGameError(RuntimeError):
    """The game is too large for exact enumeration."""


class DegenerateRatioError(ArithmeticError):
    """A probability used as a denominator is effectively zero."""


class PreconditionError(RuntimeError):
    """An operation was called in a state that violates its precondition."""


class ParseError(ValueError):
    """A persisted run file could not be parsed."""

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line
