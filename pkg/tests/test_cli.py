import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from ocp import cli
from ocp.config import SWEEPABLE, RunConfig
from ocp.consumption import expected_discount
from ocp.errors import ConfigError, InfeasibleError

DETERMINISTIC = {"n1_intensity": 0.0, "n2_intensity": 0.0, "pi_tilde": 0.0}


def write_config(tmp_path, **kw):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(kw))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows


def run(tmp_path, command, name="out", config=None, *extra):
    out = tmp_path / name
    argv = [command, "--out", str(out)]
    if config is not None:
        argv += ["--config", write_config(tmp_path, **config)]
    return cli.main(argv + list(extra)), out


# ------------------------------------------------------------------ config


def test_config_defaults_are_baseline():
    p = RunConfig().market_params()
    assert (p.r_n, p.pi_hat, p.pi_tilde, p.delta, p.gamma, p.eps) == (0.05, 0.02, 0.1, 0.04, 0.5, 0.5)
    assert p.alpha == pytest.approx(0.2) and p.beta == 0.25


@settings(max_examples=40, deadline=None)
@given(
    st.floats(-0.1, 0.2),
    st.floats(0.001, 0.2),
    st.floats(-3, 0.95).filter(lambda g: abs(g) > 1e-3),
    st.floats(0.01, 0.99),
    st.integers(2, 10**6),
    st.integers(0, 2**63),
    st.lists(st.floats(-1, 1), max_size=4),
)
def test_config_roundtrip(r_n, delta, gamma, eps, n_paths, seed, values):
    cfg = RunConfig(r_n=r_n, delta=delta, gamma=gamma, eps=eps, n_paths=n_paths, master_seed=seed, sweep_values=values)
    assert RunConfig.from_json(cfg.to_json()) == cfg


@pytest.mark.parametrize(
    "data",
    [
        {"gamma": 1.5},
        {"eps": 1.0},
        {"n_paths": 1},
        {"n_steps": 0},
        {"confidence": 1.0},
        {"n_paths": 2.5},
        {"r_n": "high"},
        {"unknown_key": 1},
        {"sweep_parameter": "T"},
        {"n1_mark_kind": "pareto"},
        {"K": 1.0},
    ],
)
def test_config_rejects(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_config_bad_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        RunConfig.load(path)
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.json")


# ------------------------------------------------------------------ output helpers


def test_csv_roundtrip_precision():
    values = [math.pi, 1 / 3, 1e-300, -2.5e17, 0.1]
    data = cli.csv_bytes({"x": values, "label": ["a"] * 5}).decode().splitlines()
    assert data[0] == "x,label"
    assert [float(line.split(",")[0]) for line in data[1:]] == values


def test_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert cli.blob_sha1(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_jsonable_nonfinite():
    assert cli.jsonable({"a": np.float64(math.inf), "b": np.int64(3), "c": np.bool_(True)}) == {"a": "inf", "b": 3, "c": True}


# ------------------------------------------------------------------ simulate


def test_simulate_baseline_deterministic(tmp_path):
    code, out = run(tmp_path, "simulate", "a", None, "--seed", "42", "--paths", "3")
    assert code == 0
    paths = sorted(p.name for p in out.glob("path_*.csv"))
    assert paths == ["path_00000.csv", "path_00001.csv", "path_00002.csv"]
    assert cli.verify_manifest(out)
    code, again = run(tmp_path, "simulate", "b", None, "--seed", "42", "--paths", "3")
    for f in out.iterdir():
        assert f.read_bytes() == (again / f.name).read_bytes(), f.name
    rows = read_csv(out / "path_00000.csv")
    assert list(rows[0]) == ["time", "B", "W", "X", "xi", "R", "zeta", "event_type"]


def test_simulate_manifest_detects_tampering(tmp_path):
    code, out = run(tmp_path, "simulate", "a", None, "--paths", "2")
    (out / "terminal.csv").write_text("tampered\n")
    assert not cli.verify_manifest(out)


def test_simulate_no_jumps_wage_column(tmp_path):
    code, out = run(tmp_path, "simulate", "a", {**DETERMINISTIC, "n_steps": 20}, "--paths", "2")
    assert code == 0
    rows = read_csv(out / "path_00001.csv")
    t = np.array([float(r["time"]) for r in rows])
    w = np.array([float(r["W"]) for r in rows])
    assert w == pytest.approx(np.exp(-0.02 * t), rel=1e-14)
    assert {r["event_type"] for r in rows} == {"none"}


def test_simulate_terminal_wage_mean(tmp_path):
    code, out = run(tmp_path, "simulate", "a", {"path_files": 0, "n_steps": 1}, "--paths", "100000", "--seed", "3")
    assert code == 0 and not list(out.glob("path_*.csv"))
    w = np.array([float(r["W_T"]) for r in read_csv(out / "terminal.csv")])
    kappa, alpha = 0.145, 0.2
    m10 = alpha / kappa + (1 - alpha / kappa) * math.exp(-kappa * 10)
    assert abs(w.mean() - m10) < 3 * w.std(ddof=1) / math.sqrt(len(w))


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["solve", "--out", str(blocker / "sub")]) == 2


# ------------------------------------------------------------------ solve


def test_solve_baseline(tmp_path):
    code, out = run(tmp_path, "solve")
    assert code == 0
    sol = json.loads((out / "solution.json").read_text())
    assert sol["gamma_hat"] == pytest.approx(-0.02)
    assert sol["B_hat"] == pytest.approx(12.974425, abs=1e-6)
    rows = read_csv(out / "schedule.csv")
    assert len(rows) == 251
    assert float(rows[0]["c"]) == pytest.approx(sol["c_start"], rel=1e-15)


def test_solve_deterministic_oracle(tmp_path):
    code, out = run(tmp_path, "solve", "a", DETERMINISTIC)
    sol = json.loads((out / "solution.json").read_text())
    ode = solve_ivp(lambda t, y: [0.03 * y[0] + y[1], -0.02 * y[1]], (0, 10), [1.0, 1.0], rtol=1e-13, atol=1e-13)
    assert sol["C_hat"] == pytest.approx(ode.y[0, -1], rel=1e-9)


def test_solve_short_horizon(tmp_path):
    code, out = run(tmp_path, "solve", "a", {"T": 0.01, "n_steps": 1})
    sol = json.loads((out / "solution.json").read_text())
    rows = read_csv(out / "schedule.csv")
    assert len(rows) == 2
    c = [float(r["c"]) for r in rows]
    assert c[0] == pytest.approx(c[1], rel=1e-3)
    assert c[0] == pytest.approx(sol["C_hat"] / 0.01, rel=1e-3)


def test_solve_infeasible_exit(tmp_path, monkeypatch):
    def boom(params):
        raise InfeasibleError("C_hat = -1 <= 0")

    monkeypatch.setattr(cli, "optimal_consumption", boom)
    code, _ = run(tmp_path, "solve")
    assert code == 3


def test_invalid_config_exit(tmp_path):
    code, _ = run(tmp_path, "solve", "a", {"gamma": 1.5})
    assert code == 2
    code, _ = run(tmp_path, "verify", "b", {"gamma": 1.5})
    assert code == 2


# ------------------------------------------------------------------ verify


def test_verify_small_run(tmp_path):
    code, out = run(tmp_path, "verify", "a", None, "--paths", "3000", "--seed", "7")
    report = json.loads((out / "report.json").read_text())
    assert code == 0, report["failed"]
    names = {c["name"] for c in report["checks"]}
    assert {"foc", "adjoint", "concavity", "kernel_moments", "wage_lemma_harness", "terminal_constraint", "lambda_root"} <= names
    verdict = json.loads((out / "wage_lemma.json").read_text())
    assert verdict["verdict"] == "systematic_drift"
    assert len(read_csv(out / "wage_lemma_profile.csv")) == 11
    assert cli.verify_manifest(out)


def test_verify_tampered_multiplier(tmp_path):
    code, out = run(tmp_path, "verify", "a", {"lambda_star_override": 2.0}, "--paths", "200")
    assert code == 1
    report = json.loads((out / "report.json").read_text())
    assert "foc" in report["failed"]


# ------------------------------------------------------------------ sweep


def sweep(tmp_path, name, param, values, paths="200"):
    code, out = run(tmp_path, "sweep", name, None, "--param", param, "--values", *map(str, values), "--paths", paths)
    assert code == 0
    return read_csv(out / "sweep.csv")


def test_sweep_pi_tilde_invariance(tmp_path):
    rows = sweep(tmp_path, "a", "pi_tilde", [0, 0.1, 0.2])
    assert list(rows[0]) == ["value", "C_hat", "lambda_star", "c_start", "c_end", "E_X_T", "E_X_T_stderr"]
    C = [float(r["C_hat"]) for r in rows]
    c0 = [float(r["c_start"]) for r in rows]
    assert max(C) / min(C) - 1 < 1e-8 and max(c0) / min(c0) - 1 < 1e-8
    for r in rows:
        assert abs(float(r["E_X_T"])) < 3 * float(r["E_X_T_stderr"])


def test_sweep_K_affine(tmp_path):
    C = [float(r["C_hat"]) for r in sweep(tmp_path, "a", "K", [0, -1, -2])]
    assert np.diff(C) == pytest.approx([1.0, 1.0], rel=1e-10)


def test_sweep_w_a_affine(tmp_path):
    C = [float(r["C_hat"]) for r in sweep(tmp_path, "a", "w_a", [0, 1])]
    params = RunConfig().market_params()
    integral, _ = quad(lambda t: expected_discount(params, 0.0, t, "exact"), 0, 10, epsabs=0, epsrel=1e-13)
    assert C[1] - C[0] == pytest.approx(integral, rel=1e-9)


def test_sweep_unknown_parameter(tmp_path):
    code, _ = run(tmp_path, "sweep", "a", None, "--param", "volatility", "--values", "1")
    assert code == 2
    code, _ = run(tmp_path, "sweep", "b")
    assert code == 2


def test_sweepable_names():
    assert set(SWEEPABLE) == {"r_n", "pi_hat", "pi_tilde", "delta", "gamma", "eps", "K", "w_a", "x_a", "n1_intensity", "n2_intensity"}


# ------------------------------------------------------------------ convergence


def test_convergence_outputs(tmp_path):
    code, out = run(tmp_path, "convergence", "a", None, "--paths", "300", "--steps", "50", "100")
    assert code == 0
    rows = read_csv(out / "convergence.csv")
    assert [int(r["n_steps"]) for r in rows] == [50, 100]
    study = json.loads((out / "convergence.json").read_text())
    assert study["halving"][0]["fine"] == 100
    code, _ = run(tmp_path, "convergence", "b", None, "--paths", "10", "--steps", "30", "100")
    assert code == 2
