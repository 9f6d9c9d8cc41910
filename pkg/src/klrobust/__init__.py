"""Robustness of treatment-effect claims to covariate shift."""

from .core import (
    Claim,
    ConvergenceError,
    Dataset,
    DimensionError,
    Direction,
    DiscreteDistribution,
    InfeasibleClaimError,
    KLRobustError,
    NotAbsolutelyContinuousError,
    Sample,
    WeightedEmpirical,
    ate_under_weights,
    claim_holds,
    kl_discrete,
    kl_weighted_empirical,
)
from .solver import (
    ConstraintSpec,
    PhiDivergenceSpec,
    TiltSolution,
    constrained_tilt_solve,
    feasibility_check,
    lambda_curve,
    partition_support,
    phi_tilt_solve,
    solve_lambda,
    tilt_solve,
)

__version__ = "0.1.0"
