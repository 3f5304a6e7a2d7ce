"""Exception hierarchy shared across the package."""

from __future__ import annotations


class RatingMigrationError(Exception):
    """Base class for every error raised by this package."""


class DataError(RatingMigrationError, ValueError):
    """Malformed or inconsistent input data."""


class NumericalError(RatingMigrationError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable result."""


class ImpossibleTransitionError(NumericalError):
    """An observed transition has zero probability (or zero intensity) under the model.

    ``cells`` lists the offending ``(from_label, to_label)`` pairs; ``context``
    holds any extra detail such as the observation index or entity id.
    """

    def __init__(self, message, cells=(), context=None):
        super().__init__(message)
        self.cells = list(cells)
        self.context = dict(context or {})

    def to_dict(self):
        return {"error": "impossible_transition", "message": str(self),
                "cells": [list(c) for c in self.cells], **self.context}


class NotPositiveDefiniteError(NumericalError):
    """The observed Fisher information is not positive definite."""

    def __init__(self, message, pairs=(), eigenvalues=()):
        super().__init__(message)
        self.pairs = list(pairs)
        self.eigenvalues = list(eigenvalues)

    def to_dict(self):
        return {"error": "fisher_not_positive_definite", "message": str(self),
                "pairs": [list(p) for p in self.pairs],
                "eigenvalues": [float(v) for v in self.eigenvalues]}


class ConvergenceError(RatingMigrationError, RuntimeError):
    """An iterative procedure failed a convergence diagnostic."""


class BoundaryWarning(UserWarning):
    """EM iterates ended on the boundary of the constrained parameter space."""


class ConvergenceWarning(UserWarning):
    """An iterative procedure stopped before meeting its tolerance."""
