"""Command-line workflows: simulate, solve, verify, sweep, convergence.

Every command writes flat files into one output directory plus a
``manifest.json`` listing each file with its git-style blob hash. Given
the same config and seed, all outputs are byte-identical.

Exit codes: 0 success, 1 verification failure, 2 invalid input, config or
I/O, 3 infeasible model.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .consumption import (
    optimal_consumption,
    terminal_components,
    terminal_expectation,
)
from .errors import ConfigError, InfeasibleError, OcpError
from .kernel import ScenarioPath, mc_sample, moment_suite, path_seed, sample_scenario
from .market import MarketParams, path_table, simulate_savings, simulate_wage_exact
from .verification import (
    AdjointState,
    CheckReport,
    adjoint_residuals,
    argmax_invariance,
    bsde_check,
    concavity_check,
    eps_shift_check,
    euler_convergence,
    expected_discount_mc,
    foc_check,
    hard_constraint_diagnostic,
    objective_dominance,
    lagrange_root_find,
    ocp_constraint_fn,
    p2_closed_form,
    wage_lemma_discrepancy,
    wage_mean_check,
)

EXIT_OK, EXIT_FAILED, EXIT_INVALID, EXIT_INFEASIBLE = 0, 1, 2, 3


# ---------------------------------------------------------------- output helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return str(v)


def csv_bytes(columns: dict) -> bytes:
    """Long-format CSV, one column per key, numbers at 17 significant digits."""
    names = list(columns)
    cols = [list(columns[n]) for n in names]
    lengths = {len(c) for c in cols}
    if len(lengths) > 1:
        raise ValueError(f"ragged columns: {dict(zip(names, map(len, cols)))}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(names)
    for row in zip(*cols):
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue().encode()


def rows_to_columns(rows: list[dict]) -> dict:
    if not rows:
        return {}
    return {k: [r[k] for r in rows] for k in rows[0]}


def jsonable(obj):
    """Plain-JSON copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def json_bytes(obj) -> bytes:
    return (json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


def blob_sha1(data: bytes) -> str:
    """Hash git assigns to a blob with these contents."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


class OutputDir:
    """Collects written artifacts and emits the manifest last."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.files: dict[str, str] = {}
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {self.root}: {exc}") from exc

    def write(self, name: str, data: bytes) -> None:
        path = self.root / name
        try:
            path.write_bytes(data)
        except OSError as exc:
            raise ConfigError(f"cannot write {path}: {exc}") from exc
        self.files[name] = blob_sha1(data)

    def manifest(self, command: str, config: RunConfig, wall_time: float | None) -> dict:
        files = [{"name": n, "sha1": self.files[n]} for n in sorted(self.files)]
        content = hashlib.sha1("".join(f"{f['name']}\0{f['sha1']}\n" for f in files).encode()).hexdigest()
        doc = {
            "command": command,
            "config": _echo(config),
            "files": files,
            "library_version": __version__,
            "content_hash": content,
            "wall_time_s": wall_time,
        }
        self.write("manifest.json", json_bytes(doc))
        return doc


def _echo(config: RunConfig) -> dict:
    """Config as recorded in outputs; the output location is left out so runs compare byte-for-byte."""
    doc = config.to_dict()
    doc.pop("output_dir")
    return doc


def verify_manifest(root) -> bool:
    """True when every file listed in ``root/manifest.json`` matches its hash."""
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    for f in doc["files"]:
        path = root / f["name"]
        if not path.is_file() or blob_sha1(path.read_bytes()) != f["sha1"]:
            return False
    return True


# ---------------------------------------------------------------- commands


class _TerminalValues:
    def __init__(self, params: MarketParams, schedule):
        self.params = params
        self.schedule = schedule

    def __call__(self, scen: ScenarioPath) -> np.ndarray:
        wage = simulate_wage_exact(self.params, scen)
        x = simulate_savings(self.params, wage, self.schedule, scen)
        return np.array([wage.values[-1], x.values[-1]])


def cmd_simulate(config: RunConfig, out: OutputDir) -> int:
    """Per-path tables under the optimal plan plus terminal values of every path."""
    params = config.market_params()
    schedule = optimal_consumption(params).schedule
    grid = params.grid(config.n_steps)
    n_files = config.n_paths if config.path_files is None else min(config.path_files, config.n_paths)
    width = max(5, len(str(config.n_paths - 1)))
    for i in range(n_files):
        seed = path_seed(config.master_seed, i)
        table = path_table(params, sample_scenario(grid, params.levy, seed), schedule)
        out.write(f"path_{i:0{width}d}.csv", csv_bytes(table))
    terminal = mc_sample(_TerminalValues(params, schedule), config.n_paths, config.master_seed, grid=grid, spec=params.levy)
    out.write(
        "terminal.csv",
        csv_bytes(
            {
                "path": range(config.n_paths),
                "seed": [path_seed(config.master_seed, i) for i in range(config.n_paths)],
                "W_T": terminal[:, 0],
                "X_T": terminal[:, 1],
            }
        ),
    )
    return EXIT_OK


def cmd_solve(config: RunConfig, out: OutputDir) -> int:
    """Closed-form optimal plan, multiplier and consumption schedule."""
    params = config.market_params()
    sol = optimal_consumption(params)
    doc = sol.to_dict()
    doc["c_start"] = float(sol.schedule(params.a))
    doc["c_end"] = float(sol.schedule(params.t_end))
    out.write("solution.json", json_bytes(doc))
    t = params.grid(config.n_steps).nodes
    out.write("schedule.csv", csv_bytes({"time": t, "c": sol.schedule(t)}))
    return EXIT_OK


def run_verification(config: RunConfig) -> tuple[list[CheckReport], dict]:
    """All verification checks for one config; returns reports and the wage-lemma verdict."""
    params = config.market_params()
    n, seed = config.n_paths, config.master_seed
    sol = optimal_consumption(params)
    lam = sol.lambda_star
    reports = [
        foc_check(params, sol, lam=config.lambda_star_override),
        adjoint_residuals(params, lam),
        bsde_check(params, lam, seed=seed),
    ]
    mid = params.a + params.T / 2
    adj = AdjointState(p=(float(lam * math.exp((params.r_hat - params.delta) * (params.t_end - mid))), p2_closed_form(params, lam, mid)))
    reports.append(concavity_check(params, adj, 1000, seed, lam=lam))
    reports.append(argmax_invariance(params, 1000, seed))

    moments = moment_suite(params.grid(10), params.levy, n, seed)
    worst = max((abs(m.estimate - m.target) / m.stderr if m.stderr else float(m.estimate != m.target) * math.inf) for m in moments)
    reports.append(
        CheckReport(
            "kernel_moments",
            worst,
            moments[0].n_sigma,
            all(m.passed for m in moments),
            {"checks": [{"name": m.name, "estimate": m.estimate, "target": m.target, "stderr": m.stderr} for m in moments]},
        )
    )
    reports.append(wage_mean_check(params, [params.a + params.T * f for f in (0.1, 0.5, 1.0)], n, seed))
    reports.append(expected_discount_mc(params, [(0.0, 0.1 * params.T), (0.0, 0.5 * params.T), (0.2 * params.T, 0.7 * params.T)], n, seed))

    verdict = wage_lemma_discrepancy(params, min(n, 1000), seed)
    reports.append(
        CheckReport(
            "wage_lemma_harness",
            0.0,
            0.0,
            verdict["verdict"] in ("agreement", "systematic_drift", "unexplained"),
            {"verdict": verdict["verdict"], "drift_rate": verdict["drift_rate"], "artifact": "wage_lemma.json"},
        )
    )

    comps = terminal_components(params, n, seed, config.n_steps)
    constraint = ocp_constraint_fn(params, comps, seed)
    at_opt = constraint(lam)
    reports.append(
        CheckReport.build(
            "terminal_constraint",
            at_opt.zscore(0.0),
            3.0,
            {"mean_minus_K": at_opt.mean, "stderr": at_opt.stderr, "n_paths": n},
        )
    )
    try:
        root = lagrange_root_find(constraint, (lam / 10.0, lam * 10.0), tol=1e-12, xtol=1e-5 * lam)
        rel = abs(root.root - lam) / lam
        # the stopping band |E[M]| <= 3 stderr mapped to a relative multiplier width
        h = 1e-3 * lam
        slope = (constraint(lam + h).mean - constraint(lam - h).mean) / (2 * h)
        band = 3.0 * at_opt.stderr / abs(slope) / lam
        diag = {
            "root": root.root,
            "lambda_star": lam,
            "iterations": root.iterations,
            "noise_limited": root.noise_limited,
            "noise_band": band,
        }
    except OcpError as exc:
        rel, band, diag = math.inf, 0.0, {"error": str(exc)}
    reports.append(CheckReport.build("lambda_root", rel, max(0.01, band), diag))
    reports.append(eps_shift_check(params, sol.schedule, min(n, 1000), seed, n_steps=config.n_steps))
    reports.append(objective_dominance(params, sol, min(n, 2000), seed, n_steps=min(config.n_steps, 100)))
    hard = hard_constraint_diagnostic(params, sol.schedule, min(n, 1000), seed, config.n_steps)
    reports.append(CheckReport("hard_constraint_diagnostic", hard["violation_rate"], 1.0, True, hard))
    return reports, verdict


def cmd_verify(config: RunConfig, out: OutputDir) -> int:
    """Run the verification checks and write a pass/fail report."""
    reports, verdict = run_verification(config)
    passed = all(r.passed for r in reports)
    out.write(
        "report.json",
        json_bytes(
            {
                "passed": passed,
                "failed": [r.name for r in reports if not r.passed],
                "checks": [r.to_dict() for r in reports],
                "master_seed": config.master_seed,
                "n_paths": config.n_paths,
            }
        ),
    )
    out.write("wage_lemma.json", json_bytes(verdict))
    out.write("wage_lemma_profile.csv", csv_bytes(rows_to_columns(verdict["profile"])))
    for r in reports:
        if not r.passed:
            print(f"FAILED {r.name}: max_residual={r.max_residual:.3e} tolerance={r.tolerance:.3e}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_FAILED


def cmd_sweep(config: RunConfig, out: OutputDir) -> int:
    """Re-solve the model over values of one parameter."""
    if config.sweep_parameter is None or not config.sweep_values:
        raise ConfigError("sweep needs sweep_parameter and sweep_values")
    rows = []
    for value in config.sweep_values:
        cfg = config.with_overrides(**{config.sweep_parameter: value})
        params = cfg.market_params()
        sol = optimal_consumption(params)
        est = terminal_expectation(params, sol.schedule, cfg.n_paths, cfg.master_seed, cfg.n_steps, cfg.confidence)
        rows.append(
            {
                "value": value,
                "C_hat": sol.C_hat,
                "lambda_star": sol.lambda_star,
                "c_start": float(sol.schedule(params.a)),
                "c_end": float(sol.schedule(params.t_end)),
                "E_X_T": est.mean,
                "E_X_T_stderr": est.stderr,
            }
        )
    out.write("sweep.csv", csv_bytes(rows_to_columns(rows)))
    return EXIT_OK


def cmd_convergence(config: RunConfig, out: OutputDir) -> int:
    """Weak convergence of the Euler wage scheme against the exact simulator."""
    params = config.market_params()
    try:
        study = euler_convergence(params, config.convergence_steps, config.n_paths, config.master_seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out.write("convergence.csv", csv_bytes(rows_to_columns(study["rows"])))
    out.write("convergence.json", json_bytes(study))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "convergence": cmd_convergence,
}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ocp", description="Optimal consumption with Levy wage and stochastic inflation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", help="JSON config file (defaults to the baseline model)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--paths", type=int, help="number of Monte Carlo paths")
        p.add_argument("--out", help="output directory")
        p.add_argument("--record-timing", action="store_true", help="store wall time in the manifest (breaks byte-identity)")
        if name == "sweep":
            p.add_argument("--param", dest="sweep_parameter", help="parameter to sweep")
            p.add_argument("--values", dest="sweep_values", type=float, nargs="+", help="values to sweep over")
        if name == "convergence":
            p.add_argument("--steps", dest="convergence_steps", type=int, nargs="+", help="Euler step counts")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = RunConfig.load(args.config) if args.config else RunConfig()
        overrides = {
            "master_seed": args.seed,
            "n_paths": args.paths,
            "output_dir": args.out,
            "sweep_parameter": getattr(args, "sweep_parameter", None),
            "sweep_values": getattr(args, "sweep_values", None),
            "convergence_steps": getattr(args, "convergence_steps", None),
        }
        config = config.with_overrides(**overrides)
        out = OutputDir(Path(config.output_dir))
        start = time.perf_counter()
        out.write("config.json", json_bytes(_echo(config)))
        code = COMMANDS[args.command](config, out)
        wall = time.perf_counter() - start if args.record_timing else None
        out.manifest(args.command, config, wall)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return code


if __name__ == "__main__":
    sys.exit(main())
