import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tcportfolio.market import MarketParams

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def market_test1(**kw) -> MarketParams:
    base = dict(
        rate=0.07, drift=[0.12], cov=[[0.16]], buy_cost=[0.05], sell_cost=[0.05],
        discount=0.1, risk_aversion=0.2, horizon=5.0,
    )
    base.update(kw)
    return MarketParams(**base)


def market_test2(a12=0.028, **kw) -> MarketParams:
    base = dict(
        rate=0.0, drift=[0.14, 0.12], cov=[[0.16, a12], [a12, 0.1225]], buy_cost=0.05, sell_cost=0.05,
        discount=0.1, risk_aversion=0.2, horizon=1.0,
    )
    base.update(kw)
    return MarketParams(**base)


@pytest.fixture
def p1() -> MarketParams:
    return market_test1()


@pytest.fixture
def p2() -> MarketParams:
    return market_test2()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
