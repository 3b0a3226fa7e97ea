"""Scenario generation and the seeded Monte Carlo engine.

A scenario is one joint draw of the Brownian path and the two Poisson jump
trains on ``[a, a + T]``. The Brownian path is sampled on the union of the
grid nodes and the jump instants, so every downstream simulator can read
``B`` exactly at the times it needs.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from statistics import NormalDist
from typing import Callable, Literal

import numpy as np

from .errors import ConfigError, NonFiniteError, UnsampledTimeError

# absolute slack when matching a query time against registered times
TIME_ATOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    start: float
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def end(self) -> float:
        return self.start + self.horizon

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        nodes = self.start + self.horizon * np.arange(self.n_steps + 1) / self.n_steps
        nodes[-1] = self.end
        return nodes


@dataclass(frozen=True)
class MarkDistribution:
    """Jump-size law for the marked train: exponential(mean) or constant."""

    kind: Literal["exponential", "constant"]
    value: float

    def __post_init__(self):
        if self.kind not in ("exponential", "constant"):
            raise ConfigError(f"unknown mark distribution {self.kind!r}")
        if not self.value > 0:
            raise ConfigError(f"mark parameter must be positive, got {self.value}")

    @property
    def mean(self) -> float:
        return self.value

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "exponential":
            return rng.exponential(self.value, size)
        return np.full(size, self.value)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "exponential":
            return -self.value * np.log1p(-u)
        return np.full_like(u, self.value)


@dataclass(frozen=True)
class LevySpec:
    n1_intensity: float
    n1_marks: MarkDistribution
    n2_intensity: float

    def __post_init__(self):
        if self.n1_intensity < 0 or self.n2_intensity < 0:
            raise ConfigError("jump intensities must be nonnegative")


def levy_moments(spec: LevySpec) -> tuple[float, float]:
    """Return ``(alpha, beta)``: mean jump flow of N1 and total mass of N2."""
    return spec.n1_intensity * spec.n1_marks.mean, float(spec.n2_intensity)


@dataclass(frozen=True)
class MarkedJumpTrain:
    event_times: np.ndarray
    marks: np.ndarray

    @property
    def count(self) -> int:
        return len(self.event_times)


@dataclass(frozen=True)
class JumpTrain:
    event_times: np.ndarray

    @property
    def count(self) -> int:
        return len(self.event_times)


@dataclass(frozen=True)
class BrownianPath:
    """Brownian motion with ``B(a) = 0`` sampled at ``times``.

    ``times`` holds every grid node plus every registered jump instant.
    """

    grid: TimeGrid
    times: np.ndarray
    values: np.ndarray

    def index_of(self, t: float) -> int:
        return _index_of(self.times, t)

    def at(self, t: float) -> float:
        return float(self.values[self.index_of(t)])


def _index_of(times: np.ndarray, t: float) -> int:
    i = int(np.searchsorted(times, t))
    for j in (i - 1, i):
        if 0 <= j < len(times) and abs(times[j] - t) <= TIME_ATOL * max(1.0, abs(t)):
            return j
    raise UnsampledTimeError(t)


def brownian_increment(path: BrownianPath, s: float, t: float) -> float:
    """``B(t) - B(s)`` at registered times; no interpolation."""
    if s > t:
        raise ValueError(f"need s <= t, got s={s}, t={t}")
    if s < path.grid.start - TIME_ATOL or t > path.grid.end + TIME_ATOL:
        raise ValueError(f"[{s}, {t}] outside [{path.grid.start}, {path.grid.end}]")
    if s == t:
        path.index_of(s)
        return 0.0
    return float(path.values[path.index_of(t)] - path.values[path.index_of(s)])


@dataclass(frozen=True)
class ScenarioPath:
    brownian: BrownianPath
    n1: MarkedJumpTrain
    n2: JumpTrain
    seed: int

    @property
    def grid(self) -> TimeGrid:
        return self.brownian.grid

    @property
    def times(self) -> np.ndarray:
        return self.brownian.times

    def index_of(self, t: float) -> int:
        return self.brownian.index_of(t)

    @cached_property
    def n1_index(self) -> np.ndarray:
        return np.searchsorted(self.times, self.n1.event_times)

    @cached_property
    def n2_index(self) -> np.ndarray:
        return np.searchsorted(self.times, self.n2.event_times)

    @cached_property
    def n1_jump(self) -> np.ndarray:
        """Sum of N1 marks landing exactly at each registered time."""
        out = np.zeros(len(self.times))
        np.add.at(out, self.n1_index, self.n1.marks)
        return out

    @cached_property
    def n2_events(self) -> np.ndarray:
        """Number of N2 events at each registered time (0 or 1 a.s.)."""
        out = np.zeros(len(self.times))
        np.add.at(out, self.n2_index, 1.0)
        return out

    @cached_property
    def n2_count(self) -> np.ndarray:
        """Right-continuous N2 count on ``(a, t]`` at each registered time."""
        return np.cumsum(self.n2_events)

    def event_labels(self) -> list[str]:
        labels = ["none"] * len(self.times)
        for i in self.n1_index:
            labels[i] = "n1"
        for i in self.n2_index:
            labels[i] = "n2"
        return labels


def _poisson_times(rng, intensity, grid):
    count = rng.poisson(intensity * grid.horizon) if intensity > 0 else 0
    # (a, a+T]: 1 - U lies in (0, 1]
    return np.sort(grid.start + grid.horizon * (1.0 - rng.random(count)))


def sample_scenario(grid: TimeGrid, spec: LevySpec, seed: int) -> ScenarioPath:
    """Draw one scenario; identical ``seed`` gives a bit-identical path.

    Brownian motion, N1 and N2 use three independent child streams of
    ``seed``. Jump times are drawn first, then ``B`` is sampled on the sorted
    union of grid nodes and jump times.
    """
    rng_b, rng_1, rng_2 = (
        np.random.Generator(np.random.PCG64(s))
        for s in np.random.SeedSequence(int(seed)).spawn(3)
    )
    t1 = _poisson_times(rng_1, spec.n1_intensity, grid)
    marks = spec.n1_marks.sample(rng_1, len(t1))
    t2 = _poisson_times(rng_2, spec.n2_intensity, grid)

    nodes = grid.nodes
    if len(t1) or len(t2):
        times = np.unique(np.concatenate((nodes, t1, t2)))
    else:
        times = nodes
    values = np.empty(len(times))
    values[0] = 0.0
    np.cumsum(rng_b.standard_normal(len(times) - 1) * np.sqrt(np.diff(times)), out=values[1:])
    return ScenarioPath(
        brownian=BrownianPath(grid, times, values),
        n1=MarkedJumpTrain(t1, marks),
        n2=JumpTrain(t2),
        seed=int(seed),
    )


def path_seed(master_seed: int, index: int) -> int:
    """64-bit seed of path ``index``, hashed from ``(master_seed, index)``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    ci_low: float
    ci_high: float
    n_paths: int
    seed: int
    confidence: float = 0.95

    @classmethod
    def from_samples(cls, values, seed: int, confidence: float = 0.95) -> "McEstimate":
        values = np.asarray(values, dtype=float).ravel()
        n = len(values)
        if n < 2:
            raise ValueError("need at least 2 samples")
        if not 0 < confidence < 1:
            raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
        mean = math.fsum(values) / n
        var = math.fsum((values - mean) ** 2) / (n - 1)
        stderr = math.sqrt(var / n)
        z = NormalDist().inv_cdf(0.5 + confidence / 2)
        return cls(mean, stderr, mean - z * stderr, mean + z * stderr, n, int(seed), confidence)

    def zscore(self, target: float) -> float:
        """Distance from ``target`` in standard errors (inf if stderr is 0 and off-target)."""
        gap = abs(self.mean - target)
        if self.stderr == 0:
            return 0.0 if gap == 0 else math.inf
        return gap / self.stderr

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "stderr": self.stderr,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "confidence": self.confidence,
        }


def worker_count() -> int:
    """Worker cap from ``OCP_THREADS``; affects speed only."""
    try:
        return max(1, int(os.environ.get("OCP_THREADS", "1")))
    except ValueError:
        return 1


def _run_chunk(functional, grid, spec, master_seed, start, stop):
    rows = []
    for i in range(start, stop):
        seed = path_seed(master_seed, i)
        value = np.asarray(functional(sample_scenario(grid, spec, seed)), dtype=float)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(i, seed, value.tolist() if value.ndim else float(value))
        rows.append(value)
    return rows


def mc_sample(
    functional: Callable[[ScenarioPath], float | np.ndarray],
    n_paths: int,
    master_seed: int,
    *,
    grid: TimeGrid,
    spec: LevySpec,
    workers: int | None = None,
) -> np.ndarray:
    """Evaluate ``functional`` on ``n_paths`` seeded scenarios.

    Returns an array of shape ``(n_paths, ...)`` in path order. Path ``i``
    always sees the scenario seeded by ``path_seed(master_seed, i)``, so the
    result does not depend on ``workers``. With more than one worker the
    functional must be picklable.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or n_paths < 2 * workers:
        rows = _run_chunk(functional, grid, spec, master_seed, 0, n_paths)
    else:
        bounds = np.linspace(0, n_paths, workers * 4 + 1).astype(int)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_chunk, functional, grid, spec, master_seed, lo, hi)
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if hi > lo
            ]
            rows = [row for fut in futures for row in fut.result()]
    return np.array(rows)


def mc_estimate(
    functional: Callable[[ScenarioPath], float],
    n_paths: int,
    master_seed: int,
    confidence: float = 0.95,
    *,
    grid: TimeGrid,
    spec: LevySpec,
    workers: int | None = None,
) -> McEstimate:
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    if not 0 < confidence < 1:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    values = mc_sample(functional, n_paths, master_seed, grid=grid, spec=spec, workers=workers)
    return McEstimate.from_samples(values, master_seed, confidence)


@dataclass
class MomentCheck:
    name: str
    estimate: float
    target: float
    stderr: float
    n_sigma: float = field(default=4.0)

    @property
    def passed(self) -> bool:
        if self.stderr == 0:
            return self.estimate == self.target
        return abs(self.estimate - self.target) <= self.n_sigma * self.stderr


class _MomentFunctional:
    """Per-path statistics for the kernel moment suite."""

    def __call__(self, scen: ScenarioPath) -> np.ndarray:
        db = scen.brownian.values[-1]
        return np.array(
            [db, db * db, scen.n2.count, scen.n1.count, scen.n1.marks.sum()], dtype=float
        )


def moment_suite(
    grid: TimeGrid, spec: LevySpec, n_paths: int, master_seed: int, n_sigma: float = 4.0
) -> list[MomentCheck]:
    """Brownian, Poisson and compound-Poisson moment and independence checks."""
    alpha, beta = levy_moments(spec)
    T = grid.horizon
    x = mc_sample(_MomentFunctional(), n_paths, master_seed, grid=grid, spec=spec)
    db, db2, n2, n1, zsum = x.T

    def est(values):
        return McEstimate.from_samples(values, master_seed)

    checks = []
    for name, values, target in [
        ("brownian_mean", db, 0.0),
        ("brownian_variance", db2, T),
        ("n2_count_mean", n2, beta * T),
        ("n2_count_variance", (n2 - beta * T) ** 2, beta * T),
        ("n1_count_mean", n1, spec.n1_intensity * T),
        ("compound_sum_mean", zsum, alpha * T),
    ]:
        e = est(values)
        checks.append(MomentCheck(name, e.mean, target, e.stderr, n_sigma))
    for name, other in [("corr_brownian_n2", n2), ("corr_brownian_n1", n1)]:
        if np.std(other) == 0:
            checks.append(MomentCheck(name, 0.0, 0.0, 0.0, n_sigma))
            continue
        corr = float(np.corrcoef(db, other)[0, 1])
        checks.append(MomentCheck(name, corr, 0.0, 1.0 / math.sqrt(n_paths), n_sigma))
    return checks
