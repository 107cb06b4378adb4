"""Canned parameter sets for the three markets.

Demand elasticity, supply slope, cartel effects, and the six dynamic cost
parameters are point estimates carried as fixtures. Route demand levels and
the supply intercept are calibrated, not estimated: they are chosen so that
per-firm static profits land on the same order as the dynamic costs
(tenths of 100bn USD), which keeps entry, exit, and investment all active
in simulated panels.
"""
from __future__ import annotations

import numpy as np

from .dynamics import DynamicParams
from .errors import ConfigError
from .statics import Regime, StaticParams

MARKETS = ("transpacific", "transatlantic", "asia_europe")

DEFAULT_BASE_YEAR = 1973
DEFAULT_HORIZON = 18   # 1973-1990

_CALIBRATED_GAMMA0 = 400.0  # USD/TEU

STATIC_FIXTURES = {
    market: StaticParams(
        alpha1=-0.869,
        gamma0=_CALIBRATED_GAMMA0,
        gamma1=180.190,
        cartel_effect_pre80=1106.208,
        cartel_effect_80_83=440.663,
    )
    for market in MARKETS
}

DYNAMIC_FIXTURES = {
    "transpacific": DynamicParams(
        exit_cost=0.200, operation_cost=0.103, entry_cost=0.055,
        invest_cost_low=0.152, invest_cost_high=0.162, logit_scale=0.101,
    ),
    "transatlantic": DynamicParams(
        exit_cost=0.193, operation_cost=0.096, entry_cost=0.109,
        invest_cost_low=0.146, invest_cost_high=0.256, logit_scale=0.100,
    ),
    "asia_europe": DynamicParams(
        exit_cost=0.302, operation_cost=0.105, entry_cost=0.001,
        invest_cost_low=0.076, invest_cost_high=0.078, logit_scale=0.078,
    ),
}

# Calibrated log demand levels (eastbound, westbound).
_DEMAND_LEVELS = {
    "transpacific": (21.3, 21.1),
    "transatlantic": (21.2, 21.0),
    "asia_europe": (21.3, 21.1),
}


def regime_for_year(year: int) -> Regime:
    if year <= 1979:
        return Regime.COLLUSIVE79
    if year <= 1983:
        return Regime.COLLUSIVE83
    return Regime.COMPETITIVE


def regime_path(
    horizon: int = DEFAULT_HORIZON, base_year: int = DEFAULT_BASE_YEAR
) -> tuple[Regime, ...]:
    return tuple(regime_for_year(base_year + t) for t in range(horizon))


def demand_path(market: str, horizon: int = DEFAULT_HORIZON) -> np.ndarray:
    """(T, 2) log demand states for both routes of a market.

    A mild secular growth trend plus a six-year business cycle around the
    calibrated route levels. The time variation moves per-period profits
    enough that exit, investment, and entry rates all swing over the
    sample, which is what pins down the action-cost parameters relative
    to the choice-noise scale in parameter-recovery exercises.
    """
    if market not in _DEMAND_LEVELS:
        raise ConfigError(f"unknown market {market!r}; expected one of {MARKETS}")
    t = np.arange(horizon)[:, np.newaxis]
    levels = np.array(_DEMAND_LEVELS[market])
    return levels + 0.02 * t + 0.35 * np.sin(2.0 * np.pi * t / 6.0)
