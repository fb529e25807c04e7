"""Total-variation solvers (FastSolver, Residual Solver), outer loops for
linear imaging operators, the unrolled RSnet, and a straight-ray
speed-of-sound model."""

__version__ = "0.1.0"

from .grid import (SolverConfig, adjoint_gradient, cut, gradient, normalized_energy, rof_energy,
                   shrink, total_energy, tv_energy)
from .rof import fast_solver, residual_solver

__all__ = [
    "SolverConfig", "adjoint_gradient", "cut", "fast_solver", "gradient", "normalized_energy",
    "residual_solver", "rof_energy", "shrink", "total_energy", "tv_energy", "__version__",
]
