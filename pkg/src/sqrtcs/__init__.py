"""Chance-constrained covariance steering in Cholesky-factor coordinates.

The state covariance is carried as its lower-triangular Cholesky factor
``S_k`` and propagated by a QR factorization; the resulting nonconvex
problem is solved by sequential convex programming with conic
subproblems.
"""

from .conic import ClarabelBackend, ConicProgram
from .config import ScenarioConfig, load_config, parse_config
from .errors import (BackendFailure, ConfigError, DegenerateReference, DomainError, InvalidParameter,
                     InvalidSpec, LayoutMismatch, MaxIterations, NotPositiveDefinite, RankDeficient,
                     ShapeMismatch, SqrtCsError, UnsupportedCone)
from .fullcov import covariance_propagation_loss, solve_fullcov_unconstrained
from .iterate import Iterate, Policy
from .ltv import LtvSystem, build_cwh_zoh, build_double_integrator
from .reformulate import Affine, CcSpec, CsProblem, EoQ, Norm, ObstacleSpec, QoN
from .scenarios import load_bundled, prepare
from .scvx import ScpParams, ScpReport, solve
from .validate import McEnsemble, simulate

__version__ = "0.1.0"

__all__ = [
    "Affine", "BackendFailure", "CcSpec", "ClarabelBackend", "ConfigError", "ConicProgram", "CsProblem",
    "DegenerateReference", "DomainError", "EoQ", "InvalidParameter", "InvalidSpec", "Iterate",
    "LayoutMismatch", "LtvSystem", "MaxIterations", "McEnsemble", "Norm", "NotPositiveDefinite",
    "ObstacleSpec", "Policy", "QoN", "RankDeficient", "ScenarioConfig", "ScpParams", "ScpReport",
    "ShapeMismatch", "SqrtCsError", "UnsupportedCone", "build_cwh_zoh", "build_double_integrator",
    "covariance_propagation_loss", "load_bundled", "load_config", "parse_config", "prepare",
    "simulate", "solve", "solve_fullcov_unconstrained",
]
