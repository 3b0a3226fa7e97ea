"""Optimal consumption with a Levy wage and stochastic inflation.

Exact path simulation of the real wage and savings, the closed-form
optimal plan under an expected terminal constraint, and numerical checks
of the maximum-principle conditions behind it.
"""

__version__ = "0.1.0"

from .config import RunConfig
from .consumption import (
    CrraUtility,
    ExponentialSchedule,
    SoftSolution,
    capital_C,
    expected_discount,
    lambda_star,
    objective_value,
    optimal_consumption,
)
from .errors import ConfigError, InfeasibleError, OcpError
from .kernel import LevySpec, MarkDistribution, McEstimate, TimeGrid, sample_scenario
from .market import MarketParams, simulate_savings, simulate_wage_exact

__all__ = [
    "ConfigError",
    "CrraUtility",
    "ExponentialSchedule",
    "InfeasibleError",
    "LevySpec",
    "MarkDistribution",
    "MarketParams",
    "McEstimate",
    "OcpError",
    "RunConfig",
    "SoftSolution",
    "TimeGrid",
    "capital_C",
    "expected_discount",
    "lambda_star",
    "objective_value",
    "optimal_consumption",
    "sample_scenario",
    "simulate_savings",
    "simulate_wage_exact",
]
