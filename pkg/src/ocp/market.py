"""Price level, real wage and real savings dynamics.

All processes are evaluated at the registered times of a ``ScenarioPath``
(grid nodes plus jump instants). The real wage follows

    dW = (alpha - [pi_hat + beta(1-eps)] W) dt - pi_tilde W dB
         + int z Ñ1(dt,dz) - (1-eps) W int Ñ2(dt,dz),

and real savings

    dX = (r_hat X + W - c) dt - pi_tilde X dB,   r_hat = r_n - pi_hat.

Price normalization ``xi(0) = 1`` is at calendar time 0, with the
convention ``B(a) = 0`` at the planning start ``a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Union

import numpy as np

from .errors import ConfigError
from .kernel import LevySpec, ScenarioPath, TimeGrid, levy_moments
from .quadrature import cumulative_trapezoid

Schedule = Union[float, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class MarketParams:
    r_n: float
    pi_hat: float
    pi_tilde: float
    delta: float
    gamma: float
    eps: float
    K: float
    x_a: float
    w_a: float
    a: float
    T: float
    levy: LevySpec

    def __post_init__(self):
        problems = []
        if not 0 < self.eps < 1:
            problems.append(f"eps must lie in (0, 1), got {self.eps}")
        if not self.gamma < 1 or self.gamma == 0:
            problems.append(f"gamma must satisfy gamma < 1 and gamma != 0, got {self.gamma}")
        if not self.delta > 0:
            problems.append(f"delta must be positive, got {self.delta}")
        if not self.x_a > 0:
            problems.append(f"x_a must be positive, got {self.x_a}")
        if not self.w_a >= 0:
            problems.append(f"w_a must be nonnegative, got {self.w_a}")
        if not self.K <= 0:
            problems.append(f"K must be nonpositive, got {self.K}")
        if not self.T > 0:
            problems.append(f"T must be positive, got {self.T}")
        if not self.a >= 0:
            problems.append(f"a must be nonnegative, got {self.a}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                problems.append(f"{f.name} must be finite")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def alpha(self) -> float:
        return levy_moments(self.levy)[0]

    @property
    def beta(self) -> float:
        return levy_moments(self.levy)[1]

    @property
    def r_hat(self) -> float:
        return self.r_n - self.pi_hat

    @property
    def kappa(self) -> float:
        """Mean-reversion rate of the wage: pi_hat + beta(1 - eps)."""
        return self.pi_hat + self.beta * (1.0 - self.eps)

    @property
    def t_end(self) -> float:
        return self.a + self.T

    def grid(self, n_steps: int) -> TimeGrid:
        return TimeGrid(self.a, self.T, n_steps)

    def replace(self, **changes) -> "MarketParams":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class PricePath:
    times: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class WagePath:
    times: np.ndarray
    values: np.ndarray
    left: np.ndarray
    n_clamped: int = 0

    def at(self, t: float) -> float:
        from .kernel import _index_of

        return float(self.values[_index_of(self.times, t)])


@dataclass(frozen=True)
class SavingsPath:
    times: np.ndarray
    values: np.ndarray

    def at(self, t: float) -> float:
        from .kernel import _index_of

        return float(self.values[_index_of(self.times, t)])


@dataclass(frozen=True)
class DiscountProcesses:
    times: np.ndarray
    Pi: np.ndarray
    R: np.ndarray
    zeta: np.ndarray
    zeta_left: np.ndarray


def price_level(params: MarketParams, scenario: ScenarioPath, t: float) -> float:
    b = scenario.brownian.at(t)
    return math.exp((params.pi_hat - 0.5 * params.pi_tilde**2) * t + params.pi_tilde * b)


def price_path(params: MarketParams, scenario: ScenarioPath) -> PricePath:
    t = scenario.times
    log_xi = (params.pi_hat - 0.5 * params.pi_tilde**2) * t + params.pi_tilde * scenario.brownian.values
    return PricePath(t, np.exp(log_xi))


def discount_processes(params: MarketParams, scenario: ScenarioPath) -> DiscountProcesses:
    t = scenario.times
    b = scenario.brownian.values
    Pi = (params.pi_hat + 0.5 * params.pi_tilde**2) * t + params.pi_tilde * b
    R = params.r_n * t - Pi
    beta, eps = params.beta, params.eps
    compensated_n2 = scenario.n2_count - beta * (t - params.a)
    zeta = Pi + beta * (1.0 - eps) * t - math.log(eps) * compensated_n2
    zeta_left = zeta + math.log(eps) * scenario.n2_events
    return DiscountProcesses(t, Pi, R, zeta, zeta_left)


def _affine_recursion(x0: float, A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``x[k+1] = A[k] x[k] + b[k]`` for ``k = 0..n-1``."""
    out = np.empty(len(A) + 1)
    out[0] = x0
    if len(A) == 0:
        return out
    if np.all(A > 0):
        P = np.cumprod(A)
        out[1:] = P * (x0 + np.cumsum(b / P))
        return out
    x = x0
    for k in range(len(A)):
        x = A[k] * x + b[k]
        out[k + 1] = x
    return out


def simulate_wage_exact(params: MarketParams, scenario: ScenarioPath) -> WagePath:
    """Exact pathwise wage on the scenario's registered times.

    Removing the compensators turns the wage SDE into
    ``dW = -pi_hat W dt - pi_tilde W dB + z N1(dt,dz) - (1-eps) W N2(dt)``:
    between events ``W`` is geometric with factor
    ``exp(-(pi_hat + pi_tilde^2/2) dt - pi_tilde dB)``, an N1 event adds its
    mark and an N2 event multiplies by ``eps``. Coincident events apply N1
    first, then N2.
    """
    t = scenario.times
    b = scenario.brownian.values
    g = np.exp(-(params.pi_hat + 0.5 * params.pi_tilde**2) * np.diff(t) - params.pi_tilde * np.diff(b))
    e = params.eps ** scenario.n2_events[1:]
    A = g * e
    jumps = scenario.n1_jump[1:] * e
    values = _affine_recursion(params.w_a, A, jumps)
    left = np.empty_like(values)
    left[0] = values[0]
    left[1:] = g * values[:-1]
    return WagePath(t, values, left)


def _grid_indices(scenario: ScenarioPath, grid: TimeGrid) -> np.ndarray:
    nodes = grid.nodes
    idx = np.clip(np.searchsorted(scenario.times, nodes), 0, len(scenario.times) - 1)
    lower = np.clip(idx - 1, 0, None)
    use_lower = np.abs(scenario.times[lower] - nodes) < np.abs(scenario.times[idx] - nodes)
    idx = np.where(use_lower, lower, idx)
    off = np.abs(scenario.times[idx] - nodes) > 1e-12 * np.maximum(1.0, np.abs(nodes))
    if np.any(off):
        from .errors import UnsampledTimeError

        raise UnsampledTimeError(float(nodes[np.argmax(off)]))
    return idx


# fraction of clamped Euler steps above which a run is unfit for convergence studies
CLAMP_RATE_LIMIT = 1e-3


def simulate_wage_euler(params: MarketParams, scenario: ScenarioPath, grid: TimeGrid) -> WagePath:
    """Explicit Euler on the compensated wage SDE over ``grid``.

    ``grid`` nodes must be registered on the scenario. Jumps falling in the
    cell ``(t_k, t_{k+1}]`` enter that step's increments. Negative values are
    clamped to 0 and counted in ``n_clamped``.
    """
    idx = _grid_indices(scenario, grid)
    dt = np.diff(grid.nodes)
    db = np.diff(scenario.brownian.values[idx])
    z_cum = np.cumsum(scenario.n1_jump)[idx]
    n2_cum = scenario.n2_count[idx]
    dz = np.diff(z_cum)
    dn2 = np.diff(n2_cum)
    alpha, beta, eps = params.alpha, params.beta, params.eps
    A = 1.0 - params.kappa * dt - params.pi_tilde * db - (1.0 - eps) * (dn2 - beta * dt)
    b = alpha * dt + (dz - alpha * dt)
    values = _affine_recursion(params.w_a, A, b)
    n_clamped = 0
    if np.any(values < 0):
        w = params.w_a
        for k in range(len(A)):
            w = A[k] * w + b[k]
            if w < 0:
                w = 0.0
                n_clamped += 1
            values[k + 1] = w
    return WagePath(grid.nodes.copy(), values, values.copy(), n_clamped)


def wage_closed_form(params: MarketParams, scenario: ScenarioPath) -> WagePath:
    """Evaluate the integrating-factor wage formula literally on a path.

    W(t) = w_a e^{-(zeta(t)-zeta(a))} + int_a^t alpha e^{-(zeta(t)-zeta(s))} ds
           + int_a^t int z e^{-(zeta(t)-zeta(s-))} Ñ1(ds,dz),

    with the Ñ1 integral taken as the sum over N1 events minus the
    ``alpha ds`` compensator, both ds-integrals by the path trapezoid rule.
    This formula is compared against ``simulate_wage_exact`` by the
    discrepancy harness; it is not used downstream.
    """
    d = discount_processes(params, scenario)
    zeta, zeta_left = d.zeta, d.zeta_left
    alpha = params.alpha
    # e^{zeta} kernel integral, piecewise through N2 jumps
    kernel_int = cumulative_trapezoid(d.times, np.exp(zeta), np.exp(zeta_left))
    drift = alpha * kernel_int
    n1_sum = np.cumsum(scenario.n1_jump * np.exp(zeta_left))
    compensated = n1_sum - alpha * kernel_int
    values = np.exp(-zeta) * (params.w_a * math.exp(zeta[0]) + drift + compensated)
    n1_sum_left = n1_sum - scenario.n1_jump * np.exp(zeta_left)
    left = np.exp(-zeta_left) * (params.w_a * math.exp(zeta[0]) + drift + n1_sum_left - alpha * kernel_int)
    return WagePath(d.times, values, left)


def _schedule_values(consumption: Schedule, times: np.ndarray) -> np.ndarray:
    if callable(consumption):
        return np.broadcast_to(np.asarray(consumption(times), dtype=float), times.shape)
    return np.full(times.shape, float(consumption))


def linear_sde_path(
    alpha_coef: float,
    beta_coef: float,
    x_a: float,
    scenario: ScenarioPath,
    forcing,
    forcing_left=None,
) -> np.ndarray:
    """Integrating-factor solution of ``dX = (mu + alpha X) dt + beta X dB``.

    ``forcing`` gives ``mu`` at every registered time (``forcing_left`` its
    left limits where it jumps). Returns ``X`` at every registered time.
    """
    t = scenario.times
    expo = (alpha_coef - 0.5 * beta_coef**2) * t + beta_coef * scenario.brownian.values
    h = np.exp(-expo)
    mu = np.broadcast_to(np.asarray(forcing, dtype=float), t.shape)
    mu_left = mu if forcing_left is None else np.broadcast_to(np.asarray(forcing_left, dtype=float), t.shape)
    integral = cumulative_trapezoid(t, h * mu, h * mu_left)
    return np.exp(expo) * (x_a * h[0] + integral)


def linear_sde_solve(alpha_coef, beta_coef, forcing, x_a, scenario, t, forcing_left=None) -> float:
    return float(linear_sde_path(alpha_coef, beta_coef, x_a, scenario, forcing, forcing_left)[scenario.index_of(t)])


def simulate_savings(
    params: MarketParams, wage: WagePath, consumption: Schedule, scenario: ScenarioPath
) -> SavingsPath:
    """Real savings ``X = x_a e^{R(t)-R(a)} + int_a^t e^{R(t)-R(s)} (W - c) ds``."""
    t = scenario.times
    c = _schedule_values(consumption, t)
    values = linear_sde_path(params.r_hat, -params.pi_tilde, params.x_a, scenario, wage.values - c, wage.left - c)
    return SavingsPath(t, values)


def annuity_path(params: MarketParams, scenario: ScenarioPath) -> np.ndarray:
    """``F(t) = int_a^t e^{R(t)-R(s)} ds``: the savings cost of one extra unit of consumption."""
    return linear_sde_path(params.r_hat, -params.pi_tilde, 0.0, scenario, 1.0)


def simulate_savings_euler(
    params: MarketParams,
    wage: WagePath,
    consumption: Schedule,
    scenario: ScenarioPath,
    grid: TimeGrid,
) -> SavingsPath:
    """Euler scheme for the savings SDE on ``grid`` (cross-check only)."""
    idx = _grid_indices(scenario, grid)
    nodes = grid.nodes
    w = wage.values[idx] if len(wage.values) == len(scenario.times) else wage.values
    c = _schedule_values(consumption, nodes)
    dt = np.diff(nodes)
    db = np.diff(scenario.brownian.values[idx])
    A = 1.0 + params.r_hat * dt - params.pi_tilde * db
    b = (w[:-1] - c[:-1]) * dt
    return SavingsPath(nodes.copy(), _affine_recursion(params.x_a, A, b))


def nominal_view(params: MarketParams, scenario: ScenarioPath, wage: WagePath, savings: SavingsPath, s0: float = 1.0) -> dict:
    """Nominal wage, savings, bond price and bond holdings (reporting only)."""
    xi = price_path(params, scenario).values
    bond = s0 * np.exp(params.r_n * scenario.times)
    x_n = xi * savings.values
    return {"W_n": xi * wage.values, "X_n": x_n, "S": bond, "eta": x_n / bond}


def path_table(params: MarketParams, scenario: ScenarioPath, consumption: Schedule) -> dict:
    """Columns of a path dump: time, B, W, X, xi, R, zeta, event_type."""
    wage = simulate_wage_exact(params, scenario)
    savings = simulate_savings(params, wage, consumption, scenario)
    d = discount_processes(params, scenario)
    return {
        "time": scenario.times,
        "B": scenario.brownian.values,
        "W": wage.values,
        "X": savings.values,
        "xi": price_path(params, scenario).values,
        "R": d.R,
        "zeta": d.zeta,
        "event_type": scenario.event_labels(),
    }
