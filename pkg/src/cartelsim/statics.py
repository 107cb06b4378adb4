"""Spot-market equilibrium: demand, supply, cartel markup, quotas, surpluses.

Prices solve the fixed point P = gamma0 + gamma1 * Q(P)/S + cartel_effect,
where Q(P) = exp(D) * P**alpha1 is constant-elasticity demand. The residual
Delta(P) = P - gamma0 - gamma1*Q(P)/S - cartel_effect is strictly increasing
when alpha1 < 0, gamma0 > 0 and gamma1 > 0, so a bracketed root is unique.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

from scipy.optimize import brentq

from .errors import ConsistencyError, DomainError, SolverError

# Relative residual required of a solved equilibrium price.
PRICE_RESIDUAL_RTOL = 1e-10


class Regime(enum.Enum):
    """Industry regime: strong cartel, weak cartel, or competition."""

    COLLUSIVE79 = "collusive79"      # years <= 1979
    COLLUSIVE83 = "collusive83"      # 1980-1983
    COMPETITIVE = "competitive"      # >= 1984

    @property
    def collusive(self) -> bool:
        return self is not Regime.COMPETITIVE


class AllocationKind(enum.Enum):
    TONNAGE_SHARE = "tonnage_share"
    FAVOR_SMALL = "favor_small"    # boosts levels 1-2, penalizes 3-4
    FAVOR_LARGE = "favor_large"    # boosts levels 3-4, penalizes 1-2


@dataclass(frozen=True)
class StaticParams:
    """Demand/supply/cartel coefficients for one route environment."""

    alpha1: float                   # demand price elasticity, < 0
    gamma0: float                   # supply intercept, USD/TEU, > 0
    gamma1: float                   # supply slope on Q/S, USD/TEU, >= 0
    cartel_effect_pre80: float      # supply shift during <=1979
    cartel_effect_80_83: float      # supply shift during 1980-83

    def validate(self) -> None:
        # These sign conditions are exactly the uniqueness conditions of the
        # price fixed point; gamma1 == 0 is the documented flat-supply case.
        if not self.alpha1 < 0:
            raise DomainError(f"alpha1 must be negative, got {self.alpha1}")
        if not self.gamma0 > 0:
            raise DomainError(f"gamma0 must be positive, got {self.gamma0}")
        if self.gamma1 < 0:
            raise DomainError(f"gamma1 must be nonnegative, got {self.gamma1}")

    def cartel_effect(self, regime: Regime) -> float:
        if regime is Regime.COLLUSIVE79:
            return self.cartel_effect_pre80
        if regime is Regime.COLLUSIVE83:
            return self.cartel_effect_80_83
        return 0.0


@dataclass(frozen=True)
class RouteSnapshot:
    """One route-year: demand state, firm tonnages, and the regime."""

    demand_state: float                 # log scale
    tonnages: tuple[float, ...]         # per-firm continuous tonnage, TEU
    regime: Regime
    year_index: int = 0

    def __post_init__(self):
        if not self.tonnages:
            raise DomainError("snapshot needs at least one firm")
        if any(s <= 0 for s in self.tonnages):
            raise DomainError("all tonnages must be positive")

    @property
    def total_tonnage(self) -> float:
        return sum(self.tonnages)


@dataclass(frozen=True)
class AllocationRule:
    """Cartel quota rule: tonnage share, or tilted toward small/large firms."""

    kind: AllocationKind = AllocationKind.TONNAGE_SHARE
    boost: float = 1.25
    penalty: float = 0.75

    def __post_init__(self):
        if self.boost <= 0 or self.penalty <= 0:
            raise DomainError("boost and penalty must be positive")


@dataclass(frozen=True)
class EquilibriumOutcome:
    price: float
    quantity: float
    firm_quantities: tuple[float, ...]
    firm_profits: tuple[float, ...]


def demand_quantity(price: float, demand_state: float, alpha1: float) -> float:
    """Constant-elasticity demand Q = exp(D) * P**alpha1."""
    if price <= 0:
        raise DomainError(f"price must be positive, got {price}")
    return math.exp(demand_state) * price ** alpha1


def marginal_cost(q: float, tonnage: float, gamma0: float, gamma1: float) -> float:
    """Firm marginal cost gamma0 + gamma1 * q / tonnage."""
    if tonnage <= 0:
        raise DomainError(f"tonnage must be positive, got {tonnage}")
    if q < 0:
        raise DomainError(f"quantity must be nonnegative, got {q}")
    return gamma0 + gamma1 * q / tonnage


def total_cost(q: float, tonnage: float, gamma0: float, gamma1: float) -> float:
    """Integrated marginal cost gamma0*q + gamma1*q^2/(2*tonnage); no fixed cost."""
    if tonnage <= 0:
        raise DomainError(f"tonnage must be positive, got {tonnage}")
    if q < 0:
        raise DomainError(f"quantity must be nonnegative, got {q}")
    return gamma0 * q + gamma1 * q * q / (2.0 * tonnage)


def individual_supply(price: float, tonnage: float, gamma0: float, gamma1: float) -> float:
    """Firm supply (P - gamma0)/gamma1 * tonnage; may be negative below gamma0."""
    if gamma1 <= 0:
        raise DomainError(f"gamma1 must be positive, got {gamma1}")
    return (price - gamma0) / gamma1 * tonnage


def allocation_weights(
    rule: AllocationRule,
    tonnages: Sequence[float],
    levels: Sequence[int] | None = None,
) -> tuple[float, ...]:
    """Quota weights, normalized to sum to one exactly.

    Tonnage share divides by capacity; the tilted rules multiply small-firm
    (levels 1-2) or large-firm (levels 3-4) tonnage by ``boost`` and the rest
    by ``penalty`` before normalizing.
    """
    if len(tonnages) == 0:
        raise DomainError("allocation needs at least one firm")
    if any(s <= 0 for s in tonnages):
        raise DomainError("all tonnages must be positive")
    if rule.kind is AllocationKind.TONNAGE_SHARE:
        transformed = list(tonnages)
    else:
        if levels is None or len(levels) != len(tonnages):
            raise DomainError("tilted rules need one capacity level per firm")
        favored = (1, 2) if rule.kind is AllocationKind.FAVOR_SMALL else (3, 4)
        transformed = [
            s * (rule.boost if lvl in favored else rule.penalty)
            for s, lvl in zip(tonnages, levels)
        ]
    total = sum(transformed)
    weights = [w / total for w in transformed]
    # Normalize residual rounding into the largest weight so the sum is exact.
    imax = max(range(len(weights)), key=weights.__getitem__)
    weights[imax] += 1.0 - sum(weights)
    return tuple(weights)


def _price_residual(price: float, snapshot: RouteSnapshot, params: StaticParams) -> float:
    q = demand_quantity(price, snapshot.demand_state, params.alpha1)
    return (
        price
        - params.gamma0
        - params.gamma1 * q / snapshot.total_tonnage
        - params.cartel_effect(snapshot.regime)
    )


def equilibrium_price(snapshot: RouteSnapshot, params: StaticParams) -> float:
    """Root of Delta(P), the unique market-clearing price.

    Brackets the monotone residual and runs Brent, then polishes with
    Newton steps until |Delta(P)| < 1e-10 * max(1, P).
    """
    params.validate()
    base = params.gamma0 + params.cartel_effect(snapshot.regime)
    if params.gamma1 == 0.0:
        return base  # flat supply: degenerate closed form
    lo = 1e-9
    hi = max(1.0, 2.0 * base)
    for _ in range(200):
        if _price_residual(hi, snapshot, params) > 0:
            break
        hi *= 2.0
    else:
        raise SolverError("could not bracket the equilibrium price")
    price = brentq(
        _price_residual, lo, hi, args=(snapshot, params), xtol=1e-12, rtol=8.9e-16
    )
    # Newton polish: Delta' = 1 - gamma1*exp(D)*alpha1*P^(alpha1-1)/S > 1.
    for _ in range(5):
        res = _price_residual(price, snapshot, params)
        if abs(res) < PRICE_RESIDUAL_RTOL * max(1.0, price):
            break
        slope = 1.0 - (
            params.gamma1
            * math.exp(snapshot.demand_state)
            * params.alpha1
            * price ** (params.alpha1 - 1.0)
            / snapshot.total_tonnage
        )
        price -= res / slope
    else:
        raise SolverError("equilibrium price did not reach residual tolerance")
    return price


def equilibrium_outcome(
    snapshot: RouteSnapshot,
    params: StaticParams,
    rule: AllocationRule = AllocationRule(),
    levels: Sequence[int] | None = None,
) -> EquilibriumOutcome:
    """Price, quantity and the per-firm split of quantities and profits.

    Collusive regimes split Q* by the quota rule; the competitive regime uses
    each firm's supply curve, clamped at zero (negative supply cannot occur at
    the fixed point but can under counterfactual parameter sweeps).
    """
    price = equilibrium_price(snapshot, params)
    quantity = demand_quantity(price, snapshot.demand_state, params.alpha1)
    if snapshot.regime.collusive:
        weights = allocation_weights(rule, snapshot.tonnages, levels)
        firm_q = [quantity * w for w in weights]
    elif params.gamma1 == 0.0:
        # Flat supply: demand split by tonnage share, the gamma1 -> 0 limit.
        share = [s / snapshot.total_tonnage for s in snapshot.tonnages]
        firm_q = [quantity * w for w in share]
    else:
        firm_q = [
            max(0.0, individual_supply(price, s, params.gamma0, params.gamma1))
            for s in snapshot.tonnages
        ]
    firm_pi = [
        price * q - total_cost(q, s, params.gamma0, params.gamma1)
        for q, s in zip(firm_q, snapshot.tonnages)
    ]
    return EquilibriumOutcome(
        price=price,
        quantity=quantity,
        firm_quantities=tuple(firm_q),
        firm_profits=tuple(firm_pi),
    )


def market_profit(route_outcomes: Sequence[EquilibriumOutcome]) -> tuple[float, ...]:
    """Per-firm profit summed across a market's routes (eastbound + westbound).

    Every route must carry the same firm roster, since each ship serves both
    directions of the round trip.
    """
    if not route_outcomes:
        raise ConsistencyError("market_profit needs at least one route outcome")
    n = len(route_outcomes[0].firm_profits)
    for out in route_outcomes[1:]:
        if len(out.firm_profits) != n:
            raise ConsistencyError("route outcomes have different firm rosters")
    return tuple(
        sum(out.firm_profits[i] for out in route_outcomes) for i in range(n)
    )


def consumer_surplus(
    price: float, demand_state: float, alpha1: float, choke_price: float
) -> float:
    """Area under the demand curve from price to the choke price.

    With |alpha1| < 1 the integral to infinity diverges, hence the explicit
    upper limit: exp(D) * (choke^(a+1) - P^(a+1)) / (a+1) with a = alpha1.
    """
    if choke_price < price:
        raise DomainError("choke price must be at least the market price")
    if alpha1 == -1.0:
        return math.exp(demand_state) * (math.log(choke_price) - math.log(price))
    a1 = alpha1 + 1.0
    return math.exp(demand_state) * (choke_price ** a1 - price ** a1) / a1


def producer_surplus(firm_profits: Sequence[float]) -> float:
    """Sum of static profits across incumbents."""
    return float(sum(firm_profits))
