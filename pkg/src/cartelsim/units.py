"""Unit conventions and shared numeric constants.

Prices are USD per TEU (1995 CPI), quantities and tonnage are TEU,
dynamic costs are measured in 100 billion USD, welfare in billion USD.
All conversions live here so no magic factors appear elsewhere.
"""

# 100 billion USD, the unit of dynamic cost parameters and value functions.
USD_PER_COST_UNIT = 1e11

# 1 billion USD, the unit of reported welfare numbers.
USD_PER_WELFARE_UNIT = 1e9

# Euler-Mascheroni constant, used in the closed-form expected maximum of
# type-one extreme value shocks.
EULER_GAMMA = 0.5772156649015329


def usd_to_cost_units(x: float) -> float:
    return x / USD_PER_COST_UNIT


def usd_to_welfare_units(x: float) -> float:
    return x / USD_PER_WELFARE_UNIT
