"""Shared fixtures: parameter sets and small solved instances reused across
test modules so expensive backward inductions run once per session."""

import numpy as np
import pytest

from cartelsim import fixtures
from cartelsim.dynamics import backward_induction
from cartelsim.simulation import MarketEnvironment
from cartelsim.states import StateSpace
from cartelsim.statics import AllocationRule, StaticParams


@pytest.fixture(scope="session")
def tp_static() -> StaticParams:
    return fixtures.STATIC_FIXTURES["transpacific"]


@pytest.fixture(scope="session")
def tp_dynamic():
    return fixtures.DYNAMIC_FIXTURES["transpacific"]


@pytest.fixture(scope="session")
def tiny_space() -> StateSpace:
    return StateSpace(caps=(2, 1, 0, 0), n_pe=2)


@pytest.fixture(scope="session")
def small_env(tp_static) -> MarketEnvironment:
    """10-year environment on a 48-state space, cheap enough to re-solve."""
    space = StateSpace(caps=(3, 2, 1, 1), n_pe=2)
    demand = fixtures.demand_path("transpacific", 10)
    regimes = fixtures.regime_path(10)
    return MarketEnvironment(
        space, tp_static, demand, regimes, "transpacific", rule=AllocationRule()
    )


@pytest.fixture(scope="session")
def small_policy(small_env, tp_dynamic):
    return backward_induction(small_env.profit_table(), tp_dynamic, tol=1e-8)
