"""Closed-form optimal consumption under the expected terminal constraint.

With CRRA utility the first-order condition pins consumption to the
deterministic adjoint ``p1(t) = lam * exp((r_hat - delta)(T + a - t))``,
so the optimal plan is exponential in time:

    c(t) = C_hat / B_hat * exp(-Gamma_hat (T + a - t)).

``C_hat`` is the expected future value at ``T + a`` of all resources net
of the floor ``K``, and ``B_hat`` converts it into a consumption level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .errors import InfeasibleError
from .kernel import McEstimate, ScenarioPath, mc_estimate, mc_sample
from .market import (
    MarketParams,
    Schedule,
    _schedule_values,
    annuity_path,
    linear_sde_path,
    simulate_savings,
    simulate_wage_exact,
)
from .quadrature import adaptive_simpson

Kernel = Literal["exact", "lemma"]


@dataclass(frozen=True)
class CrraUtility:
    gamma: float

    def __post_init__(self):
        if not self.gamma < 1 or self.gamma == 0:
            raise ValueError(f"CRRA exponent must satisfy gamma < 1, gamma != 0; got {self.gamma}")

    def value(self, c):
        c = _positive(c, "consumption")
        return c**self.gamma / self.gamma

    def marginal(self, c):
        c = _positive(c, "consumption")
        return c ** (self.gamma - 1.0)

    def inverse_marginal(self, p):
        p = _positive(p, "marginal utility")
        return p ** (1.0 / (self.gamma - 1.0))


def _positive(x, what):
    arr = np.asarray(x)
    if np.any(~(arr > 0)):
        raise ValueError(f"{what} must be positive, got {x!r}")
    return x


@dataclass(frozen=True)
class ExponentialSchedule:
    """``c(t) = level * exp(-rate * (t_end - t))``; ``level`` is ``c(t_end)``."""

    level: float
    rate: float
    t_end: float

    def __call__(self, t):
        return self.level * np.exp(-self.rate * (self.t_end - np.asarray(t, dtype=float)))

    def to_dict(self) -> dict:
        return {"t_terminal_level": self.level, "rate": self.rate}


@dataclass(frozen=True)
class TabulatedSchedule:
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.values) < 0):
            raise ValueError("consumption must be nonnegative")

    def __call__(self, t):
        return np.interp(t, self.times, self.values)


@dataclass(frozen=True)
class PerturbedSchedule:
    """``scale * base(t) * exp(tilt * (t - t0)) + shift``."""

    base: Callable
    scale: float = 1.0
    tilt: float = 0.0
    t0: float = 0.0
    shift: float = 0.0

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.scale * self.base(t) * np.exp(self.tilt * (t - self.t0)) + self.shift


def subjective_rates(params: MarketParams) -> tuple[float, float]:
    """``(r_hat, Gamma_hat)`` with ``Gamma_hat = (r_hat - delta) / (1 - gamma)``."""
    r_hat = params.r_n - params.pi_hat
    return r_hat, (r_hat - params.delta) / (1.0 - params.gamma)


def annuity_factor(params: MarketParams) -> float:
    r_hat, gamma_hat = subjective_rates(params)
    k = r_hat - gamma_hat
    T = params.T
    if abs(k) < 1e-9:
        return T * (1.0 + k * T / 2.0)
    return math.expm1(k * T) / k


def discount_rate(params: MarketParams, kernel: Kernel = "exact") -> float:
    """Decay rate of the expected wage kernel over ``(s, t]``.

    ``exact`` is the mean decay of the simulated wage,
    ``pi_hat + beta(1 - eps)``. ``lemma`` is the mean decay of
    ``exp(-(zeta(t) - zeta(s)))`` with ``zeta`` from the closed-form wage
    formula, which carries an extra ``-beta(eps - 1 - ln eps)``.
    """
    base = params.pi_hat + params.beta * (1.0 - params.eps)
    if kernel == "exact":
        return base
    if kernel == "lemma":
        return base - params.beta * (params.eps - 1.0 - math.log(params.eps))
    raise ValueError(f"unknown kernel {kernel!r}")


def expected_discount(params: MarketParams, s: float, t: float, kernel: Kernel = "lemma") -> float:
    """``E[exp(R(T+a) - R(t+a) - (zeta(t+a) - zeta(s+a)))]`` in shifted time.

    The factor over ``(t, T]`` is ``exp(r_hat (T - t))`` for any
    ``pi_tilde``; the factor over ``(s, t]`` decays at ``discount_rate``.
    With ``kernel="exact"`` the wage kernel is the one the event-driven
    simulator realizes.
    """
    if s > t:
        raise ValueError(f"need s <= t, got s={s}, t={t}")
    if s < 0 or t > params.T:
        raise ValueError(f"need 0 <= s <= t <= T, got s={s}, t={t}, T={params.T}")
    return math.exp(params.r_hat * (params.T - t) - discount_rate(params, kernel) * (t - s))


def capital_C(params: MarketParams, kernel: Kernel = "exact", rel_tol: float = 1e-8) -> float:
    """Expected time-``T+a`` value of savings, wage and wage jumps, minus ``K``."""
    T = params.T
    total = params.x_a * math.exp(params.r_hat * T) - params.K
    if params.w_a != 0:
        total += params.w_a * adaptive_simpson(
            lambda t: expected_discount(params, 0.0, t, kernel), 0.0, T, rel_tol
        )
    if params.alpha != 0:
        def inner(t):
            return adaptive_simpson(lambda s: expected_discount(params, s, t, kernel), 0.0, t, rel_tol)

        total += params.alpha * adaptive_simpson(inner, 0.0, T, rel_tol)
    return total


def lambda_star(params: MarketParams, kernel: Kernel = "exact") -> float:
    C = capital_C(params, kernel)
    if not C > 0:
        raise InfeasibleError(f"C_hat = {C} <= 0: no positive consumption plan meets the constraint")
    return (C / annuity_factor(params)) ** (params.gamma - 1.0)


@dataclass(frozen=True)
class SoftSolution:
    r_hat: float
    gamma_hat: float
    B_hat: float
    C_hat: float
    lambda_star: float
    schedule: ExponentialSchedule

    def to_dict(self) -> dict:
        return {
            "r_hat": self.r_hat,
            "gamma_hat": self.gamma_hat,
            "B_hat": self.B_hat,
            "C_hat": self.C_hat,
            "lambda_star": self.lambda_star,
            "schedule": self.schedule.to_dict(),
        }


def optimal_consumption(params: MarketParams, kernel: Kernel = "exact") -> SoftSolution:
    r_hat, gamma_hat = subjective_rates(params)
    B = annuity_factor(params)
    C = capital_C(params, kernel)
    if not C > 0:
        raise InfeasibleError(f"C_hat = {C} <= 0: no positive consumption plan meets the constraint")
    lam = (C / B) ** (params.gamma - 1.0)
    return SoftSolution(r_hat, gamma_hat, B, C, lam, ExponentialSchedule(C / B, gamma_hat, params.t_end))


def consumption_for_multiplier(params: MarketParams, lam: float) -> ExponentialSchedule:
    """Hamiltonian maximizer for a given multiplier: ``(u')^{-1}(p1(t))``."""
    _, gamma_hat = subjective_rates(params)
    level = CrraUtility(params.gamma).inverse_marginal(lam)
    return ExponentialSchedule(level, gamma_hat, params.t_end)


def adjoint_p1(params: MarketParams, lam: float, t):
    return lam * np.exp((params.r_hat - params.delta) * (params.t_end - np.asarray(t, dtype=float)))


def objective_value(params: MarketParams, schedule: Schedule, rel_tol: float = 1e-10) -> float:
    """``int_a^{T+a} e^{-delta(t-a)} u(c(t)) dt`` for a deterministic plan.

    Returns ``-inf`` when ``gamma < 0`` and the plan touches zero.
    """
    u = CrraUtility(params.gamma)
    probe = _schedule_values(schedule, np.linspace(params.a, params.t_end, 2001))
    if np.any(probe < 0):
        raise ValueError("consumption must be nonnegative")
    if params.gamma < 0 and np.any(probe <= 0):
        return -math.inf

    def integrand(t):
        c = float(_schedule_values(schedule, np.array([t]))[0])
        if c <= 0:
            return 0.0
        return math.exp(-params.delta * (t - params.a)) * u.value(c)

    return adaptive_simpson(integrand, params.a, params.t_end, rel_tol)


class TerminalSavings:
    """Per-path ``X_c(T+a)`` from the exact wage and the savings formula."""

    def __init__(self, params: MarketParams, schedule: Schedule):
        self.params = params
        self.schedule = schedule

    def __call__(self, scen: ScenarioPath) -> float:
        wage = simulate_wage_exact(self.params, scen)
        return float(simulate_savings(self.params, wage, self.schedule, scen).values[-1])


def terminal_expectation(
    params: MarketParams,
    schedule: Schedule,
    n_paths: int,
    seed: int,
    n_steps: int = 250,
    confidence: float = 0.95,
) -> McEstimate:
    return mc_estimate(
        TerminalSavings(params, schedule),
        n_paths,
        seed,
        confidence,
        grid=params.grid(n_steps),
        spec=params.levy,
    )


class TerminalComponents:
    """Per-path pieces of ``X(T+a)`` that are linear in consumption.

    Returns ``[X_0, G, F]``: savings with zero consumption, the savings cost
    of the unit-level optimal shape ``exp(-Gamma_hat (T+a-s))``, and the
    cost of one constant unit of consumption. Any multiplier's plan then has
    ``X(T+a) = X_0 - level * G``.
    """

    def __init__(self, params: MarketParams):
        self.params = params
        _, self.gamma_hat = subjective_rates(params)

    def __call__(self, scen: ScenarioPath) -> np.ndarray:
        p = self.params
        wage = simulate_wage_exact(p, scen)
        x0 = simulate_savings(p, wage, 0.0, scen).values[-1]
        shape = np.exp(-self.gamma_hat * (p.t_end - scen.times))
        G = linear_sde_path(p.r_hat, -p.pi_tilde, 0.0, scen, shape)[-1]
        F = annuity_path(p, scen)[-1]
        return np.array([x0, G, F])


def terminal_components(params: MarketParams, n_paths: int, seed: int, n_steps: int = 250) -> np.ndarray:
    return mc_sample(TerminalComponents(params), n_paths, seed, grid=params.grid(n_steps), spec=params.levy)
