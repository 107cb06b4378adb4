"""Forward simulation, counterfactual scenarios, and welfare accounting.

Paths are simulated year by year from solved choice probabilities with a
counter-based RNG (run i of an ensemble draws from seed base_seed + i, so
ensembles are reproducible and order-independent). Counterfactuals patch
the static environment — cartel effects zeroed, or the quota rule tilted —
re-solve the game, and re-simulate; welfare is aggregated per policy-regime
window in discounted billions of USD.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .dynamics import (
    DynamicParams,
    PolicySolution,
    ProfitTable,
    backward_induction,
    build_profit_table,
)
from .errors import ConfigError, ConsistencyError, DomainError
from . import statics
from .statics import (
    AllocationKind,
    AllocationRule,
    EquilibriumOutcome,
    Regime,
    RouteSnapshot,
    StaticParams,
)
from .states import (
    ActionTally,
    IndustryState,
    N_LEVELS,
    StateSpace,
    apply_transition,
    representative_tonnage,
)
from .units import usd_to_welfare_units

DEFAULT_N_SIMS = 1000
DEFAULT_BASE_YEAR = 1973
# (start, end) calendar years of the three policy regimes.
DEFAULT_REGIME_WINDOWS = ((1973, 1979), (1980, 1983), (1984, 1990))


class ScenarioKind(enum.Enum):
    BASELINE = "baseline"
    NO_CARTEL = "no-cartel"
    FAVOR_SMALL = "omega1"
    FAVOR_LARGE = "omega2"


@dataclass(frozen=True)
class Scenario:
    """A counterfactual: which lever to pull, plus optional parameter patches."""

    kind: ScenarioKind = ScenarioKind.BASELINE
    static_overrides: Mapping[str, float] = field(default_factory=dict)
    dynamic_overrides: Mapping[str, float] = field(default_factory=dict)

    def patch_static(self, params: StaticParams) -> StaticParams:
        patched = replace(params, **dict(self.static_overrides))
        if self.kind is ScenarioKind.NO_CARTEL:
            patched = replace(patched, cartel_effect_pre80=0.0, cartel_effect_80_83=0.0)
        return patched

    def allocation_rule(self, base: AllocationRule = AllocationRule()) -> AllocationRule:
        if self.kind is ScenarioKind.FAVOR_SMALL:
            return replace(base, kind=AllocationKind.FAVOR_SMALL)
        if self.kind is ScenarioKind.FAVOR_LARGE:
            return replace(base, kind=AllocationKind.FAVOR_LARGE)
        return base

    def patch_dynamic(self, params: DynamicParams) -> DynamicParams:
        return replace(params, **dict(self.dynamic_overrides))


class MarketEnvironment:
    """One market's full static environment across the horizon.

    Bundles the state space, demand states per route-year, regimes, and the
    spot-market parameters, and caches equilibrium outcomes per (period,
    state) so path simulation and welfare reuse each other's solves.
    """

    def __init__(
        self,
        space: StateSpace,
        static_params: StaticParams,
        demand_states: np.ndarray,       # (T, n_routes), log scale
        regimes: Sequence[Regime],
        market: str,
        rule: AllocationRule = AllocationRule(),
        base_year: int = DEFAULT_BASE_YEAR,
    ):
        static_params.validate()
        self.space = space
        self.static_params = static_params
        self.demand_states = np.atleast_2d(np.asarray(demand_states, dtype=float))
        if len(regimes) != self.demand_states.shape[0]:
            raise ConfigError("need one regime per period")
        self.regimes = tuple(regimes)
        self.market = market
        self.rule = rule
        self.base_year = base_year
        self._rep = tuple(
            representative_tonnage(l, market) for l in range(1, N_LEVELS + 1)
        )
        self._outcome_cache: dict[tuple[int, IndustryState], tuple] = {}

    @property
    def horizon(self) -> int:
        return self.demand_states.shape[0]

    def year(self, t: int) -> int:
        return self.base_year + t

    def profit_table(self) -> ProfitTable:
        return build_profit_table(
            self.space, self.static_params, self.demand_states,
            self.regimes, self.market, self.rule,
        )

    def outcomes(self, t: int, state: IndustryState) -> tuple[EquilibriumOutcome, ...]:
        """Per-route equilibrium outcomes at a realized state; empty-state
        periods yield zero-quantity placeholders."""
        key = (t, state)
        if key not in self._outcome_cache:
            if state.total_firms == 0:
                outs = tuple(
                    EquilibriumOutcome(float("nan"), 0.0, (), ())
                    for _ in range(self.demand_states.shape[1])
                )
            else:
                tonnages, levels = [], []
                for lvl, n in enumerate(state, start=1):
                    tonnages.extend([self._rep[lvl - 1]] * n)
                    levels.extend([lvl] * n)
                outs = tuple(
                    statics.equilibrium_outcome(
                        RouteSnapshot(float(d), tuple(tonnages), self.regimes[t]),
                        self.static_params, self.rule, levels,
                    )
                    for d in self.demand_states[t]
                )
            self._outcome_cache[key] = outs
        return self._outcome_cache[key]


@dataclass
class SimulatedPath:
    """One realized industry path: states, actions, and spot-market outcomes."""

    seed: int
    states: list[IndustryState]          # length H
    tallies: list[ActionTally]           # length H-1
    prices: np.ndarray                   # (H, n_routes), NaN when empty
    quantities: np.ndarray               # (H, n_routes)
    profits: np.ndarray                  # (H,), total static profit, USD

    @property
    def horizon(self) -> int:
        return len(self.states)


@dataclass
class Ensemble:
    base_seed: int
    paths: list[SimulatedPath]
    mean_counts: np.ndarray              # (H, 4) mean firms per level

    @property
    def n_runs(self) -> int:
        return len(self.paths)


def _sample_tally(
    rng: np.random.Generator,
    state: IndustryState,
    ccp_inc_t: np.ndarray,   # (4, S, 3) for this period
    ccp_pe_t: np.ndarray,    # (S, 2)
    state_index: int,
    n_pe: int,
) -> ActionTally:
    exits, builds = [0] * N_LEVELS, [0] * N_LEVELS
    for l in range(N_LEVELS):
        n = state[l]
        if n:
            counts = rng.multinomial(n, ccp_inc_t[l, state_index])
            exits[l], builds[l] = int(counts[0]), int(counts[2])
    entries = int(rng.binomial(n_pe, ccp_pe_t[state_index, 1])) if n_pe else 0
    return ActionTally(
        exits=tuple(exits), builds=tuple(builds),
        entrant_quits=n_pe - entries, entrant_entries=entries,
    )


def simulate_path(
    policy: PolicySolution,
    env: MarketEnvironment,
    initial_state: IndustryState,
    seed: int,
    horizon: int | None = None,
) -> SimulatedPath:
    """Sample one path: every firm draws from its CCP row each year."""
    space = policy.space
    horizon = policy.horizon if horizon is None else horizon
    if horizon > policy.horizon or horizon > env.horizon:
        raise DomainError("horizon exceeds the solved policy or environment")
    rng = np.random.Generator(np.random.Philox(seed))
    n_routes = env.demand_states.shape[1]
    states = [initial_state]
    tallies: list[ActionTally] = []
    for t in range(horizon - 1):
        s = states[-1]
        tally = _sample_tally(
            rng, s, policy.ccp_inc[t], policy.ccp_pe[t], space.index(s), space.n_pe
        )
        tallies.append(tally)
        states.append(apply_transition(s, tally, space.caps))
    prices = np.full((horizon, n_routes), np.nan)
    quantities = np.zeros((horizon, n_routes))
    profits = np.zeros(horizon)
    for t, s in enumerate(states):
        for r, out in enumerate(env.outcomes(t, s)):
            prices[t, r] = out.price
            quantities[t, r] = out.quantity
            profits[t] += statics.producer_surplus(out.firm_profits)
    return SimulatedPath(
        seed=seed, states=states, tallies=tallies,
        prices=prices, quantities=quantities, profits=profits,
    )


def simulate_ensemble(
    policy: PolicySolution,
    env: MarketEnvironment,
    initial_state: IndustryState,
    n: int = DEFAULT_N_SIMS,
    base_seed: int = 0,
    horizon: int | None = None,
) -> Ensemble:
    """n independent paths; run i uses seed base_seed + i."""
    if n < 1:
        raise ConfigError(f"need at least one simulation run, got {n}")
    paths = [
        simulate_path(policy, env, initial_state, base_seed + i, horizon)
        for i in range(n)
    ]
    counts = np.array([[list(s) for s in p.states] for p in paths], dtype=float)
    return Ensemble(base_seed=base_seed, paths=paths, mean_counts=counts.mean(axis=0))


@dataclass
class ScenarioResult:
    scenario: Scenario
    env: MarketEnvironment
    policy: PolicySolution
    ensemble: Ensemble


def run_scenario(
    scenario: Scenario,
    env: MarketEnvironment,
    dynamic_params: DynamicParams,
    initial_state: IndustryState,
    n_sims: int = DEFAULT_N_SIMS,
    base_seed: int = 0,
    **solver_options,
) -> ScenarioResult:
    """Patch the environment per the scenario, re-solve, and simulate."""
    patched_env = MarketEnvironment(
        env.space,
        scenario.patch_static(env.static_params),
        env.demand_states,
        env.regimes,
        env.market,
        scenario.allocation_rule(env.rule),
        env.base_year,
    )
    policy = backward_induction(
        patched_env.profit_table(), scenario.patch_dynamic(dynamic_params),
        **solver_options,
    )
    ensemble = simulate_ensemble(
        policy, patched_env, initial_state, n=n_sims, base_seed=base_seed
    )
    return ScenarioResult(
        scenario=scenario, env=patched_env, policy=policy, ensemble=ensemble
    )


@dataclass
class WelfareReport:
    """Discounted CS/PS/SW per regime window, in billions of USD."""

    windows: tuple[tuple[int, int], ...]
    consumer_surplus: np.ndarray     # (n_windows,)
    producer_surplus: np.ndarray
    choke_price: float

    @property
    def social_welfare(self) -> np.ndarray:
        return self.consumer_surplus + self.producer_surplus


def ensemble_max_price(ensemble: Ensemble) -> float:
    prices = np.concatenate([p.prices.ravel() for p in ensemble.paths])
    prices = prices[np.isfinite(prices)]
    if prices.size == 0:
        raise ConsistencyError("no finite prices in the ensemble")
    return float(prices.max())


def welfare_by_regime(
    ensemble: Ensemble,
    env: MarketEnvironment,
    choke_price: float,
    beta: float,
    windows: Sequence[tuple[int, int]] = DEFAULT_REGIME_WINDOWS,
    net_dynamic_costs: bool = False,
    dynamic_params: DynamicParams | None = None,
) -> WelfareReport:
    """Ensemble-average discounted surplus per regime window.

    CS integrates each route's demand curve from the realized price up to
    the choke price; PS sums static profits, optionally netting realized
    dynamic costs (which requires the cost parameters). Everything is
    discounted by beta**(t) to the first simulated year.
    """
    if net_dynamic_costs and dynamic_params is None:
        raise ConfigError("netting dynamic costs requires the cost parameters")
    n_w = len(windows)
    cs_total = np.zeros(n_w)
    ps_total = np.zeros(n_w)
    alpha1 = env.static_params.alpha1
    for path in ensemble.paths:
        for t in range(path.horizon):
            year = env.year(t)
            w = next((i for i, (a, b) in enumerate(windows) if a <= year <= b), None)
            if w is None:
                continue
            disc = beta**t
            cs = 0.0
            for r in range(path.prices.shape[1]):
                p = path.prices[t, r]
                if np.isfinite(p):
                    cs += statics.consumer_surplus(
                        p, env.demand_states[t, r], alpha1, choke_price
                    )
            ps = path.profits[t]
            if net_dynamic_costs and t < len(path.tallies):
                ps -= _dynamic_cost_outlay(path.tallies[t], path.states[t], dynamic_params)
            cs_total[w] += disc * usd_to_welfare_units(cs)
            ps_total[w] += disc * usd_to_welfare_units(ps)
    n = ensemble.n_runs
    return WelfareReport(
        windows=tuple(windows),
        consumer_surplus=cs_total / n,
        producer_surplus=ps_total / n,
        choke_price=choke_price,
    )


def _dynamic_cost_outlay(
    tally: ActionTally, state: IndustryState, params: DynamicParams
) -> float:
    """Realized action costs for one year, converted back to USD."""
    from .units import USD_PER_COST_UNIT

    cost = 0.0
    for l in range(N_LEVELS):
        ex, b = tally.exits[l], tally.builds[l]
        keep = state[l] - ex - b
        cost += ex * params.exit_cost
        cost += (keep + b) * params.operation_cost
        cost += b * params.invest_cost(l + 1)
    cost += tally.entrant_entries * params.entry_cost
    return cost * USD_PER_COST_UNIT


def welfare_deltas(base: WelfareReport, counterfactual: WelfareReport) -> dict[str, np.ndarray]:
    """Proportional changes vs baseline: (cf - base) / base per window."""
    if base.windows != counterfactual.windows:
        raise ConsistencyError("welfare reports cover different regime windows")

    def rel(b: np.ndarray, c: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(b != 0, (c - b) / np.abs(b), 0.0)

    return {
        "consumer_surplus": rel(base.consumer_surplus, counterfactual.consumer_surplus),
        "producer_surplus": rel(base.producer_surplus, counterfactual.producer_surplus),
        "social_welfare": rel(base.social_welfare, counterfactual.social_welfare),
    }
