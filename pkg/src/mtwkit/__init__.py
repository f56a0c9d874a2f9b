"""Numerical toolkit for optimal transport with general costs.

Cost models and their derivative tensors, sampled checks of the structural
conditions, domain sampling and c-convexity tests, discrete Kantorovich
duality, a continuation solver for the second boundary value problem of
the transport Monge-Ampere equation, and diagnostics on solved fields.
"""

__version__ = "0.1.0"

from .cost_models import COST_IDS, CostModel, derivative_bundle, solve_X, solve_Y
from .condition_checks import SampleRegion, check_A1, check_A2, check_A3w, classify_power_costs
from .diagnostics import diagnose
from .duality import WeightedCloud, solve_dual_discrete
from .geometry import DomainSpec, build_domain, disk, interval
from .pde_solver import Schedule, continuation_solve, make_problem

__all__ = [
    "COST_IDS", "CostModel", "derivative_bundle", "solve_X", "solve_Y",
    "SampleRegion", "check_A1", "check_A2", "check_A3w", "classify_power_costs",
    "diagnose", "WeightedCloud", "solve_dual_discrete",
    "DomainSpec", "build_domain", "disk", "interval",
    "Schedule", "continuation_solve", "make_problem",
]
