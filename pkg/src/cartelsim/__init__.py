"""Structural model of a cartelized shipping industry.

Spot-market equilibrium with cartel effects and quota allocation, a
finite-horizon dynamic entry/exit/investment game solved by backward
induction over CCP fixed points, nested-fixed-point maximum likelihood,
and counterfactual/welfare simulation.
"""

__version__ = "1.0.0"

from .errors import (
    CartelsimError,
    ConfigError,
    ConsistencyError,
    DomainError,
    EstimationError,
    LoadError,
    SolverError,
)
from .statics import (
    AllocationKind,
    AllocationRule,
    EquilibriumOutcome,
    Regime,
    RouteSnapshot,
    StaticParams,
    allocation_weights,
    consumer_surplus,
    demand_quantity,
    equilibrium_outcome,
    equilibrium_price,
    individual_supply,
    marginal_cost,
    market_profit,
    producer_surplus,
    total_cost,
)
from .states import (
    ActionTally,
    IndustryState,
    StateSpace,
    apply_transition,
    discretize_tonnage,
    entrant_profile_prob,
    enumerate_states,
    level_profile_prob,
    representative_tonnage,
    roundtrip_tonnage,
    transition_distribution,
)
from .dynamics import (
    DynamicParams,
    PolicySolution,
    ProfitTable,
    backward_induction,
    build_kernel,
    build_profit_table,
    ccp_from_csvf,
    expected_continuation,
    integrated_value,
    per_period_cost,
    solve_period_fixed_point,
    terminal_value,
)
from .estimation import (
    EstimationResult,
    ObservedTransition,
    RegressionReport,
    demand_state,
    dynamic_log_likelihood,
    estimate_dynamic,
    lr_confidence_intervals,
    ols_panel,
    supply_intercept,
    tsls_panel,
)
from .simulation import (
    Ensemble,
    MarketEnvironment,
    Scenario,
    ScenarioKind,
    SimulatedPath,
    WelfareReport,
    run_scenario,
    simulate_ensemble,
    simulate_path,
    welfare_by_regime,
    welfare_deltas,
)
