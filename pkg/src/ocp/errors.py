"""Exception types shared across the package."""


class OcpError(Exception):
    """Base class for all package errors."""


class ConfigError(OcpError, ValueError):
    """Invalid model parameters or run configuration."""


class UnsampledTimeError(OcpError, KeyError):
    """A path was queried at a time that was never sampled on it."""

    def __init__(self, t):
        super().__init__(f"unsampled time {t!r}")
        self.t = t

    def __str__(self):
        return self.args[0]


class NonFiniteError(OcpError, ArithmeticError):
    """A Monte Carlo functional produced a non-finite value."""

    def __init__(self, path_index, seed, value):
        super().__init__(
            f"non-finite functional value {value!r} on path {path_index} (seed {seed})"
        )
        self.path_index = path_index
        self.seed = seed
        self.value = value


class QuadratureError(OcpError, ArithmeticError):
    """Adaptive quadrature failed to reach the requested tolerance."""


class InfeasibleError(OcpError):
    """The model admits no positive consumption plan (C_hat <= 0)."""


class BracketError(OcpError, ValueError):
    """A root-finding bracket does not straddle zero."""
