import math

import mpmath
import numpy as np
import pytest

from conftest import make_params
from ocp.consumption import (
    CrraUtility,
    PerturbedSchedule,
    adjoint_p1,
    consumption_for_multiplier,
    optimal_consumption,
    terminal_components,
    terminal_expectation,
)
from ocp.errors import BracketError
from ocp.verification import (
    AdjointState,
    CheckReport,
    HamiltonianInput,
    _nu1_integral,
    adjoint_residuals,
    argmax_invariance,
    bsde_check,
    concavity_check,
    euler_convergence,
    euler_mean_bias,
    expected_discount_mc,
    foc_check,
    golden_section_max,
    hamiltonian_tilde,
    hard_constraint_diagnostic,
    lagrange_root_find,
    linear_bsde_solve,
    objective_dominance,
    ocp_constraint_fn,
    p2_closed_form,
    perturbation_family,
    wage_lemma_discrepancy,
    wage_mean_check,
    wage_mean_ode,
)

ZERO = AdjointState(p=(0.0, 0.0))


# ------------------------------------------------------------------ Hamiltonian


def test_hamiltonian_utility_only(baseline):
    h = hamiltonian_tilde(baseline, HamiltonianInput(1.0, (2.0, 3.0), 4.0, ZERO))
    assert h == pytest.approx(4.0, rel=1e-15)


def test_hamiltonian_linear_part(baseline):
    adj = AdjointState(p=(1.0, 0.0))
    h = hamiltonian_tilde(baseline, HamiltonianInput(1.0, (2.0, 3.0), 0.0, adj))
    assert h == pytest.approx(0.03 * 2.0 + 3.0, rel=1e-14)
    with pytest.raises(ValueError):
        HamiltonianInput(1.0, (2.0, 3.0), -1.0, adj)


def test_hamiltonian_stationary_at_optimum(baseline):
    sol = optimal_consumption(baseline)
    lam = sol.lambda_star
    t = baseline.a
    adj = AdjointState(p=(float(adjoint_p1(baseline, lam, t)), p2_closed_form(baseline, lam, t)))
    c = float(sol.schedule(t))
    h = 1e-5 * c

    def H(cc):
        return hamiltonian_tilde(baseline, HamiltonianInput(t, (baseline.x_a, baseline.w_a), cc, adj))

    assert abs((H(c + h) - H(c - h)) / (2 * h)) < 1e-8


def test_nu1_integral_quadrature(baseline):
    # callable marks-dependent coefficient against an mpmath reference
    ref = float(
        mpmath.quad(lambda z: z * mpmath.exp(-z) * mpmath.exp(-z / 0.2) / 0.2, [0, mpmath.inf])
    )
    assert _nu1_integral(baseline, lambda t, z: math.exp(-z), 0.0) == pytest.approx(ref, rel=1e-12)
    assert _nu1_integral(baseline, lambda t, z: 1.0, 0.0) == pytest.approx(baseline.alpha, rel=1e-12)
    assert _nu1_integral(baseline, 2.0, 0.0) == pytest.approx(2 * baseline.alpha, rel=1e-15)
    const = make_params(n1=2.0, mark=("constant", 0.5))
    assert _nu1_integral(const, lambda t, z: z, 0.0) == pytest.approx(2.0 * 0.25)


# ------------------------------------------------------------------ FOC and adjoints


def test_foc_pass(baseline):
    rep = foc_check(baseline, optimal_consumption(baseline))
    assert rep.passed and rep.max_residual < 1e-12


def test_foc_negative_controls(baseline):
    sol = optimal_consumption(baseline)
    bumped = PerturbedSchedule(sol.schedule, scale=1.01)
    rep = foc_check(baseline, sol, schedule=bumped)
    assert not rep.passed
    assert rep.max_residual == pytest.approx(abs(1.01 ** (1 - baseline.gamma) - 1), rel=1e-10)
    assert rep.max_residual == pytest.approx(0.005, rel=0.01)
    rep = foc_check(baseline, sol, lam=2 * sol.lambda_star)
    assert not rep.passed and rep.max_residual == pytest.approx(1.0, rel=1e-12)


def test_adjoint_residuals(baseline):
    lam = optimal_consumption(baseline).lambda_star
    rep = adjoint_residuals(baseline, lam)
    assert rep.passed
    assert rep.diagnostics["p1_ode_residual"] < 1e-12
    assert rep.diagnostics["p2_rk4_vs_quadrature"] < 1e-8


def test_adjoint_trivia(baseline):
    p = make_params(delta=baseline.r_hat)
    rep = adjoint_residuals(p, 0.8)
    assert rep.diagnostics["p1_ode_residual"] == 0.0
    rep = adjoint_residuals(baseline, 0.0)
    assert rep.passed and rep.diagnostics["p2_initial"] == 0.0


def test_p2_closed_form_mpmath(baseline):
    lam = 0.9
    r, d, k = (mpmath.mpf(v) for v in (baseline.r_hat, baseline.delta, baseline.kappa))
    for t in (0.0, 3.0, 9.5):
        ref = lam * mpmath.quad(lambda s: mpmath.exp((r - d) * (10 - s) - (k + d) * (s - t)), [t, 10])
        assert p2_closed_form(baseline, lam, t) == pytest.approx(float(ref), rel=1e-11)


# ------------------------------------------------------------------ linear BSDE


def test_bsde_constant_and_exponential():
    t = np.linspace(0, 5, 11)
    assert linear_bsde_solve(0.0, 0.0, 0.3, 2.0, t).values == pytest.approx([2.0] * 11, rel=1e-15)
    assert linear_bsde_solve(0.0, 0.1, 0.0, 2.0, t).values == pytest.approx(2.0 * np.exp(0.1 * (5 - t)), rel=1e-14)


def test_bsde_reproduces_p1(baseline):
    lam = 0.93
    t = np.linspace(0, 10, 51)
    sol = linear_bsde_solve(0.0, baseline.r_hat - baseline.delta, 0.0, lam, t)
    assert sol.values == pytest.approx(adjoint_p1(baseline, lam, t), rel=1e-12)


def test_bsde_forcing_mpmath():
    t = np.array([0.0, 1.0, 2.0])
    sol = linear_bsde_solve(lambda s: math.sin(s), lambda s: 0.1 * s, 0.0, 1.5, t)
    for ti, yi in zip(t, sol.values):
        gamma = lambda a, b: mpmath.exp(0.05 * (b**2 - a**2))
        ref = 1.5 * gamma(ti, 2) + mpmath.quad(lambda s: gamma(ti, s) * mpmath.sin(s), [ti, 2])
        assert yi == pytest.approx(float(ref), rel=1e-11)


def test_bsde_flow_check(baseline):
    rep = bsde_check(baseline, 0.93)
    assert rep.passed and rep.max_residual < 1e-12


# ------------------------------------------------------------------ concavity and argmax


def test_concavity_baseline(baseline):
    lam = optimal_consumption(baseline).lambda_star
    adj = AdjointState(p=(float(adjoint_p1(baseline, lam, 5.0)), p2_closed_form(baseline, lam, 5.0)))
    rep = concavity_check(baseline, adj, 1000, 0, lam=lam)
    assert rep.passed and rep.diagnostics["failures"] == 0
    assert rep.diagnostics["worst_affine_midpoint_error"] <= 1e-10


def test_concavity_detects_convex_payoff(baseline):
    adj = AdjointState(p=(1.0, 0.5))
    rep = concavity_check(baseline, adj, 200, 0, utility=lambda c: c * c)
    assert not rep.passed and rep.diagnostics["failures"] > 0


@pytest.mark.parametrize("gamma", [0.5, -2.0])
def test_argmax_invariance(gamma):
    rep = argmax_invariance(make_params(gamma=gamma), 1000, 3)
    assert rep.passed, rep


def test_golden_section():
    assert golden_section_max(lambda x: -(x - 1.3) ** 2, 0.0, 4.0) == pytest.approx(1.3, abs=1e-9)


# ------------------------------------------------------------------ root finding


def test_root_deterministic(deterministic):
    p = deterministic
    lam_star = optimal_consumption(p).lambda_star
    comps = terminal_components(p, 2, 0, n_steps=20000)
    fn = ocp_constraint_fn(p, comps)
    res = lagrange_root_find(fn, (lam_star / 10, lam_star * 10), tol=1e-14, xtol=1e-12 * lam_star)
    assert res.root == pytest.approx(lam_star, rel=1e-8)


def test_root_bracket_error():
    with pytest.raises(BracketError):
        lagrange_root_find(lambda lam: 1.0, (0.1, 10.0), 1e-8)
    with pytest.raises(BracketError):
        lagrange_root_find(lambda lam: lam - 1, (2.0, 1.0), 1e-8)


def test_root_iteration_bound():
    tol = 1e-9
    res = lagrange_root_find(lambda lam: math.atan(lam - 0.3712), (0.0, 4.0), tol=0.0, xtol=tol)
    assert res.iterations <= math.ceil(math.log2(4.0 / tol))
    assert res.root == pytest.approx(0.3712, abs=2 * tol)
    assert len(res.trace) == res.iterations + 2


def test_theorem1_end_to_end(baseline):
    """Root from one seed, constraint re-checked on an independent seed."""
    comps = terminal_components(baseline, 20000, 101, n_steps=100)
    lam_star = optimal_consumption(baseline).lambda_star
    res = lagrange_root_find(ocp_constraint_fn(baseline, comps), (lam_star / 10, lam_star * 10), 1e-12, 1e-6)
    assert abs(res.root / lam_star - 1) < 0.02
    plan = consumption_for_multiplier(baseline, res.root)
    est = terminal_expectation(baseline, plan, 20000, 202, n_steps=100)
    assert est.zscore(baseline.K) < 3


# ------------------------------------------------------------------ diagnostics


def test_hard_constraint_deterministic(deterministic):
    sol = optimal_consumption(deterministic)
    diag = hard_constraint_diagnostic(deterministic, sol.schedule, 3, 0, n_steps=20000)
    assert diag["violation_rate"] == 0.0
    zero = hard_constraint_diagnostic(deterministic, 0.0, 3, 0, n_steps=10)
    assert zero["violation_rate"] == 0.0


def test_hard_constraint_baseline_reported(baseline):
    sol = optimal_consumption(baseline)
    diag = hard_constraint_diagnostic(baseline, sol.schedule, 2000, 0, n_steps=50)
    assert 0.0 < diag["violation_rate"] < 1.0
    q = diag["quantiles"]
    assert q["q01"] <= q["q05"] <= q["q50"] <= q["q95"] <= q["q99"]


def test_wage_lemma_verdicts(baseline):
    out = wage_lemma_discrepancy(baseline, 200, 0, n_steps=50)
    assert out["verdict"] == "systematic_drift"
    d = -0.25 * (0.5 + math.log(0.5))
    assert out["drift_rate"] == pytest.approx(d)
    last = out["profile"][-1]
    assert last["time"] == 10.0
    assert last["initial_wage_factor"] == pytest.approx(math.exp(10 * d))
    assert out["profile"][0]["ratio_mean"] == pytest.approx(1.0)
    assert wage_lemma_discrepancy(make_params(n2=0.0), 100, 0, n_steps=50)["verdict"] == "agreement"


def test_objective_dominance(baseline):
    sol = optimal_consumption(baseline)
    assert len(perturbation_family(baseline, sol)) == 20
    rep = objective_dominance(baseline, sol, n_paths=1000, seed=0, n_steps=50)
    assert rep.passed, rep.diagnostics


def test_wage_mean_check(baseline):
    assert wage_mean_ode(baseline, 10.0) == pytest.approx(1.29033, abs=1e-5)
    rep = wage_mean_check(baseline, [1.0, 5.0, 10.0], 5000, 0)
    assert rep.passed


def test_expected_discount_mc_small(baseline):
    rep = expected_discount_mc(baseline, [(0.0, 1.0), (2.0, 7.0)], 5000, 0)
    assert rep.passed
    kernels = {r["kernel"] for r in rep.diagnostics["rows"]}
    assert kernels == {"lemma", "exact"}


def test_euler_mean_bias_theory(baseline):
    # the scheme's mean recursion against a direct loop
    n = 500
    dt = 10 / n
    m = baseline.w_a
    for _ in range(n):
        m = (1 - baseline.kappa * dt) * m + baseline.alpha * dt
    assert euler_mean_bias(baseline, n) == pytest.approx(m - wage_mean_ode(baseline, 10.0), rel=1e-9)


def test_euler_convergence_structure(baseline):
    study = euler_convergence(baseline, [50, 100], 200, 0)
    assert [r["n_steps"] for r in study["rows"]] == [50, 100]
    assert study["halving"][0]["coarse"] == 50
    with pytest.raises(ValueError):
        euler_convergence(baseline, [30, 100], 10, 0)


def test_check_report_roundtrip():
    rep = CheckReport.build("x", 0.5, 1.0, {"a": 1})
    assert rep.passed and rep.to_dict()["name"] == "x"
    assert not CheckReport.build("y", 2.0, 1.0).passed
