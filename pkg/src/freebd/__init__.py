"""Obstacle problems for nonlinear variational energies: solvers, linearisation,
hypothesis audits and free-boundary classification on uniform grids."""

from .errors import CoercivityError, ConfigurationError, EvaluationError, FreeBDError, RangeError
from .grid import Grid

__version__ = "0.1.0"

__all__ = ["Grid", "FreeBDError", "ConfigurationError", "EvaluationError", "RangeError", "CoercivityError"]
