"""Adaptive LQR under limited model information.

Library + CLI for designing and benchmarking adaptive linear-quadratic
regulators whose subcontrollers only know part of the plant model:
cost-biased maximum-likelihood estimation, closed-loop Monte-Carlo
simulation, and competitive-ratio estimation against the optimal
full-information design.
"""

from .errors import (
    AdaptLqrError,
    AllStartsInfeasible,
    ConfigError,
    DimensionMismatch,
    EstimateInfeasible,
    InfeasiblePoint,
    NonConvergence,
    NotDetectable,
    NotPositiveDefinite,
    NotSquare,
    NotStabilizable,
    NumericOverflow,
    RejectionLimitExceeded,
    SingularR,
    UnstableClosedLoop,
    WrongFamily,
)
from .matlin import (
    DareSolution,
    StabDetectFlags,
    lqr_gain,
    quad_form_diff_bound,
    solve_dare,
    spectral_norm,
    spectral_radius,
    stab_detect_check,
    sym_sqrt_psd,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptLqrError",
    "AllStartsInfeasible",
    "ConfigError",
    "DareSolution",
    "DimensionMismatch",
    "EstimateInfeasible",
    "InfeasiblePoint",
    "NonConvergence",
    "NotDetectable",
    "NotPositiveDefinite",
    "NotSquare",
    "NotStabilizable",
    "NumericOverflow",
    "RejectionLimitExceeded",
    "SingularR",
    "StabDetectFlags",
    "UnstableClosedLoop",
    "WrongFamily",
    "lqr_gain",
    "quad_form_diff_bound",
    "solve_dare",
    "spectral_norm",
    "spectral_radius",
    "stab_detect_check",
    "sym_sqrt_psd",
]
