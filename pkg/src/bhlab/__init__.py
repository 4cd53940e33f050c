"""Balanced random walks in random environments: lattice solvers, walks and homogenization experiments."""
from __future__ import annotations

from .environment import Box, Environment, EnvironmentLaw, ObservableSpec, sample_environment
from .errors import (BHLabError, ConfigurationError, DomainError, NonConvergenceError, RateFitError,
                     TruncationError)
from .lattice import LatticeDomain, LatticeField, SpaceTimeDomain, SpaceTimeField, ball, cube, cylinder, triadic_cube

__version__ = "0.1.0"

__all__ = [
    "Box", "Environment", "EnvironmentLaw", "ObservableSpec", "sample_environment",
    "BHLabError", "ConfigurationError", "DomainError", "NonConvergenceError", "RateFitError", "TruncationError",
    "LatticeDomain", "LatticeField", "SpaceTimeDomain", "SpaceTimeField", "ball", "cube", "cylinder",
    "triadic_cube", "__version__",
]
