"""Run configuration: a flat JSON document of model parameters and run controls."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .kernel import LevySpec, MarkDistribution
from .market import MarketParams

SWEEPABLE = (
    "r_n",
    "pi_hat",
    "pi_tilde",
    "delta",
    "gamma",
    "eps",
    "K",
    "w_a",
    "x_a",
    "n1_intensity",
    "n2_intensity",
)


@dataclass
class RunConfig:
    # model, rates per year, times in years
    r_n: float = 0.05
    pi_hat: float = 0.02
    pi_tilde: float = 0.1
    delta: float = 0.04
    gamma: float = 0.5
    eps: float = 0.5
    K: float = 0.0
    x_a: float = 1.0
    w_a: float = 1.0
    a: float = 0.0
    T: float = 10.0
    n1_intensity: float = 1.0
    n1_mark_kind: str = "exponential"
    n1_mark_value: float = 0.2
    n2_intensity: float = 0.25
    # run controls
    n_paths: int = 1000
    n_steps: int = 250
    master_seed: int = 0
    confidence: float = 0.95
    output_dir: str = "ocp_out"
    # command options
    sweep_parameter: str | None = None
    sweep_values: list[float] = field(default_factory=list)
    convergence_steps: list[int] = field(default_factory=lambda: [125, 250, 500, 1000])
    lambda_star_override: float | None = None
    path_files: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                raise ConfigError(f"{f.name} must be finite, got {v}")
        if self.n_paths < 2:
            raise ConfigError(f"n_paths must be >= 2, got {self.n_paths}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if not 0 < self.confidence < 1:
            raise ConfigError(f"confidence must lie in (0, 1), got {self.confidence}")
        if self.master_seed < 0:
            raise ConfigError(f"master_seed must be nonnegative, got {self.master_seed}")
        if self.sweep_parameter is not None and self.sweep_parameter not in SWEEPABLE:
            raise ConfigError(f"unknown sweep parameter {self.sweep_parameter!r}; choose from {', '.join(SWEEPABLE)}")
        if self.path_files is not None and self.path_files < 0:
            raise ConfigError(f"path_files must be nonnegative, got {self.path_files}")
        if any(n < 1 for n in self.convergence_steps):
            raise ConfigError("convergence_steps must be positive")
        self.market_params()

    def market_params(self) -> MarketParams:
        try:
            marks = MarkDistribution(self.n1_mark_kind, self.n1_mark_value)
            levy = LevySpec(self.n1_intensity, marks, self.n2_intensity)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return MarketParams(
            r_n=self.r_n,
            pi_hat=self.pi_hat,
            pi_tilde=self.pi_tilde,
            delta=self.delta,
            gamma=self.gamma,
            eps=self.eps,
            K=self.K,
            x_a=self.x_a,
            w_a=self.w_a,
            a=self.a,
            T=self.T,
            levy=levy,
        )

    def with_overrides(self, **kw) -> "RunConfig":
        data = self.to_dict()
        data.update({k: v for k, v in kw.items() if v is not None})
        return RunConfig.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for name, value in data.items():
            kw[name] = _coerce(name, known[name].type, value)
        return cls(**kw)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)


def _coerce(name: str, annotation: str, value):
    """Convert a JSON value to the field's declared type, rejecting lossy casts."""
    try:
        if annotation == "float":
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if annotation == "int":
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
                raise TypeError
            return int(value)
        if annotation == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
        if annotation == "str | None":
            if value is not None and not isinstance(value, str):
                raise TypeError
            return value
        if annotation == "float | None":
            if value is None:
                return None
            return _coerce(name, "float", value)
        if annotation == "int | None":
            if value is None:
                return None
            return _coerce(name, "int", value)
        if annotation == "list[float]":
            return [_coerce(name, "float", v) for v in value]
        if annotation == "list[int]":
            return [_coerce(name, "int", v) for v in value]
    except (TypeError, ValueError, OverflowError):
        raise ConfigError(f"{name}: cannot use {value!r} as {annotation}") from None
    raise ConfigError(f"{name}: unsupported field type {annotation}")
