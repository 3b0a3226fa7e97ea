import pytest

from ocp.kernel import LevySpec, MarkDistribution
from ocp.market import MarketParams

BASELINE = dict(
    r_n=0.05,
    pi_hat=0.02,
    pi_tilde=0.1,
    delta=0.04,
    gamma=0.5,
    eps=0.5,
    K=0.0,
    x_a=1.0,
    w_a=1.0,
    a=0.0,
    T=10.0,
)


def make_params(n1=1.0, mark=("exponential", 0.2), n2=0.25, **kw) -> MarketParams:
    fields = {**BASELINE, **kw}
    return MarketParams(levy=LevySpec(n1, MarkDistribution(*mark), n2), **fields)


@pytest.fixture
def baseline() -> MarketParams:
    return make_params()


@pytest.fixture
def deterministic() -> MarketParams:
    """All randomness off: no jumps and no price volatility."""
    return make_params(n1=0.0, n2=0.0, pi_tilde=0.0)
