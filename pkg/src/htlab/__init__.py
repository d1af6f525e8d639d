"""Numerical laboratory for generalized h-transforms of reversible Markov processes.

The package builds finite-state reversible jump models, solves the backward
and forward Feynman-Kac equations that define a change of path measure, and
provides diagnostics: stochastic derivatives, carre-du-champ operators,
Hamilton-Jacobi-Bellman residuals, Orlicz-norm integrability reports, entropic
bridge solvers, and a one-dimensional diffusion analogue.
"""

from htlab.errors import (
    ConvergenceError,
    DegenerateInputError,
    HTLabError,
    InconsistencyError,
    ModelValidationError,
    PositivityError,
)

__all__ = [
    "HTLabError",
    "ModelValidationError",
    "DegenerateInputError",
    "PositivityError",
    "ConvergenceError",
    "InconsistencyError",
    "__version__",
]

__version__ = "0.1.0"
