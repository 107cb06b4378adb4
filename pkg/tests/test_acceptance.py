"""Acceptance gate: end-to-end correctness, recovery, and sign properties.

Each test here checks one headline guarantee of the pipeline against an
independent oracle (bisection, per-firm enumeration, Monte Carlo, or a
synthetic-data round trip) under an explicit runtime budget.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy.special import logsumexp

from cartelsim import fixtures, io
from cartelsim.cli import main
from cartelsim.dynamics import (
    ProfitTable,
    backward_induction,
    build_kernel,
    ccp_from_csvf,
    integrated_value,
)
from cartelsim.estimation import estimate_dynamic, lr_confidence_intervals
from cartelsim.simulation import (
    MarketEnvironment,
    Scenario,
    ScenarioKind,
    ensemble_max_price,
    run_scenario,
    welfare_by_regime,
    welfare_deltas,
)
from cartelsim.statics import (
    Regime,
    RouteSnapshot,
    StaticParams,
    equilibrium_outcome,
    equilibrium_price,
    market_profit,
)
from cartelsim.states import (
    ActionTally,
    IndustryState,
    StateSpace,
    apply_transition,
    transition_distribution,
)

THETA_NAMES = ("exit_cost", "operation_cost", "entry_cost",
               "invest_cost_low", "invest_cost_high", "logit_scale")


# ---------------------------------------------------------------------------
# 1. Spot-market equilibrium against a bisection oracle
# ---------------------------------------------------------------------------

def _residual(p, alpha1, gamma0, gamma1, d, s):
    return p - gamma0 - gamma1 * math.exp(d) * p ** alpha1 / s


def _bisect_price(alpha1, gamma0, gamma1, d, s):
    lo, hi = 1e-9, max(1.0, 2.0 * gamma0)
    while _residual(hi, alpha1, gamma0, gamma1, d, s) <= 0:
        hi *= 2.0
    while (hi - lo) > 1e-10 * hi:
        mid = 0.5 * (lo + hi)
        if _residual(mid, alpha1, gamma0, gamma1, d, s) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def test_equilibrium_price_on_random_draws():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    for _ in range(1000):
        alpha1 = rng.uniform(-3.0, -0.1)
        gamma0 = rng.uniform(10.0, 5000.0)
        gamma1 = rng.uniform(1.0, 500.0)
        d = rng.uniform(5.0, 15.0)
        s = rng.uniform(1e3, 1e6)
        params = StaticParams(alpha1, gamma0, gamma1, 0.0, 0.0)
        snap = RouteSnapshot(d, (s,), Regime.COMPETITIVE)
        price = equilibrium_price(snap, params)
        # residual of the market-clearing condition, relative to the price
        assert abs(_residual(price, alpha1, gamma0, gamma1, d, s)) < 1e-10 * max(1.0, price)
        oracle = _bisect_price(alpha1, gamma0, gamma1, d, s)
        assert abs(price - oracle) < 1e-8 * oracle
        # the excess-supply residual is strictly increasing in price
        grid = np.geomspace(price / 10.0, price * 10.0, 100)
        resid = grid - gamma0 - gamma1 * math.exp(d) * grid ** alpha1 / s
        assert np.all(np.diff(resid) > 0)
    assert time.perf_counter() - start < 10.0


# ---------------------------------------------------------------------------
# 2. Transition kernel against per-firm enumeration
# ---------------------------------------------------------------------------

def _brute_transition(state, inc_ccps, pe_ccp, n_pe, caps):
    """Enumerate every individual firm's action instead of using counts."""
    firms = [l for l in range(4) for _ in range(state[l])]
    dist = {}
    for actions in itertools.product(range(3), repeat=len(firms)):
        p_inc = 1.0
        exits, builds = [0] * 4, [0] * 4
        for l, a in zip(firms, actions):
            p_inc *= inc_ccps[l][a]
            if a == 0:
                exits[l] += 1
            elif a == 2:
                builds[l] += 1
        for entrant_actions in itertools.product(range(2), repeat=n_pe):
            p = p_inc
            for a in entrant_actions:
                p *= pe_ccp[a]
            entries = sum(entrant_actions)
            tally = ActionTally(tuple(exits), tuple(builds),
                                n_pe - entries, entries)
            nxt = apply_transition(state, tally, caps)
            dist[nxt] = dist.get(nxt, 0.0) + p
    return dist


def test_transition_distribution_is_exact():
    rng = np.random.default_rng(7)
    caps = (4, 4, 4, 4)
    states = [
        IndustryState(*c)
        for c in itertools.product(range(5), repeat=4)
        if sum(c) <= 4
    ]
    start = time.perf_counter()
    for state in states:
        inc = [rng.dirichlet((1.0, 1.0, 1.0)) for _ in range(4)]
        pe = rng.dirichlet((1.0, 1.0))
        for n_pe in (0, 1, 2):
            got = transition_distribution(state, inc, pe, caps=caps, n_pe=n_pe)
            want = _brute_transition(state, inc, pe, n_pe, caps)
            assert set(got) == set(want)
            for nxt, p in want.items():
                assert abs(got[nxt] - p) < 1e-12
            assert abs(sum(got.values()) - 1.0) < 1e-10
    # the flat numba kernel is a proper stochastic matrix row by row
    space = StateSpace(caps=(4, 3, 2, 1), n_pe=2)
    ccp_inc = rng.dirichlet((1.0, 1.0, 1.0), size=(4, space.n_states))
    ccp_pe = rng.dirichlet((1.0, 1.0), size=space.n_states)
    kernel = build_kernel(space, ccp_inc, ccp_pe)
    np.testing.assert_allclose(kernel.sum(axis=1), 1.0, atol=1e-10)
    assert time.perf_counter() - start < 30.0


# ---------------------------------------------------------------------------
# 3. Logit machinery against Monte Carlo
# ---------------------------------------------------------------------------

def test_integrated_value_and_ccp_normalization(small_policy):
    rng = np.random.default_rng(55)
    draws = -np.log(-np.log(rng.random((1_000_000, 3))))
    for _ in range(20):
        csvf = rng.uniform(-5.0, 5.0, size=3)
        mc = float(np.mean(np.max(csvf + draws, axis=1)))
        assert abs(integrated_value(csvf, 1.0) - mc) < 1e-2
        row = ccp_from_csvf(csvf, 1.0)
        assert abs(row.sum() - 1.0) < 1e-12
    # every CCP row of a solved policy is normalized
    sums_inc = small_policy.ccp_inc.sum(axis=-1)
    sums_pe = small_policy.ccp_pe.sum(axis=-1)
    assert np.max(np.abs(sums_inc - 1.0)) < 1e-12
    assert np.max(np.abs(sums_pe - 1.0)) < 1e-12


# ---------------------------------------------------------------------------
# 4. Backward induction against a pure-Python equilibrium solver
# ---------------------------------------------------------------------------

def _oracle_solution(space, values, params):
    """Re-solve the finite-horizon game from scratch: per-firm enumeration
    for the kernel, damped best-response iteration per period, closed-form
    log-sum-exp integration for the continuation values."""
    sigma, beta = params.logit_scale, params.discount
    horizon, n_states = values.shape[0], space.n_states
    costs = {
        "psi": params.exit_cost, "phi": params.operation_cost,
        "kappa": params.entry_cost,
    }
    v = np.zeros((horizon, 4, n_states))
    v[-1] = (values[-1] / (1.0 - beta)).T
    v_pe = np.zeros((horizon, n_states))
    ccps_inc = np.zeros((horizon - 1, 4, n_states, 3))
    ccps_pe = np.zeros((horizon - 1, n_states, 2))

    def kernel_from(ccp_inc, ccp_pe):
        k = np.zeros((n_states, n_states))
        for si, state in enumerate(space.states):
            dist = _brute_transition(
                state, ccp_inc[:, si, :], ccp_pe[si], space.n_pe, space.caps
            )
            for nxt, p in dist.items():
                k[si, space.index(nxt)] += p
        return k

    def csvfs_from(kernel, v_next):
        inc = np.empty((4, n_states, 3))
        for l in range(4):
            ev_keep = kernel @ v_next[l]
            inc[l, :, 0] = -costs["psi"]
            inc[l, :, 1] = -costs["phi"] + beta * ev_keep
            if l < 3:
                iota = params.invest_cost_low if l < 2 else params.invest_cost_high
                inc[l, :, 2] = -costs["phi"] - iota + beta * (kernel @ v_next[l + 1])
            else:
                inc[l, :, 2] = 0.0
        pe = np.empty((n_states, 2))
        pe[:, 0] = 0.0
        pe[:, 1] = -costs["kappa"] + beta * (kernel @ v_next[0])
        return inc, pe

    for t in range(horizon - 2, -1, -1):
        ccp_inc = np.full((4, n_states, 3), 1.0 / 3.0)
        ccp_pe = np.full((n_states, 2), 0.5)
        # A small fixed step keeps the iteration contractive even where the
        # best-response map is expansive; the equilibrium point is unique on
        # these instances, so the step size only affects the path, not the
        # limit the production solver must match.
        for _ in range(100_000):
            kernel = kernel_from(ccp_inc, ccp_pe)
            csvf_inc, csvf_pe = csvfs_from(kernel, v[t + 1])
            new_inc = np.exp(
                csvf_inc / sigma - logsumexp(csvf_inc / sigma, axis=-1, keepdims=True))
            new_pe = np.exp(
                csvf_pe / sigma - logsumexp(csvf_pe / sigma, axis=-1, keepdims=True))
            gap = np.abs(new_inc - ccp_inc).sum() + np.abs(new_pe - ccp_pe).sum()
            ccp_inc = 0.9 * ccp_inc + 0.1 * new_inc
            ccp_pe = 0.9 * ccp_pe + 0.1 * new_pe
            if gap < 1e-13:
                break
        else:
            raise AssertionError("oracle fixed point failed to converge")
        kernel = kernel_from(ccp_inc, ccp_pe)
        csvf_inc, csvf_pe = csvfs_from(kernel, v[t + 1])
        ccps_inc[t] = np.exp(
            csvf_inc / sigma - logsumexp(csvf_inc / sigma, axis=-1, keepdims=True))
        ccps_pe[t] = np.exp(
            csvf_pe / sigma - logsumexp(csvf_pe / sigma, axis=-1, keepdims=True))
        v[t] = values[t].T + sigma * (
            np.euler_gamma + logsumexp(csvf_inc / sigma, axis=-1))
        v_pe[t] = sigma * (np.euler_gamma + logsumexp(csvf_pe / sigma, axis=-1))
    return ccps_inc, ccps_pe, v, v_pe


@pytest.mark.parametrize("horizon", [2, 3])
def test_backward_induction_matches_enumeration_oracle(horizon, tp_dynamic):
    start = time.perf_counter()
    space = StateSpace(caps=(1, 1, 0, 0), n_pe=1)
    rng = np.random.default_rng(13)
    values = rng.uniform(0.0, 0.3, size=(horizon, space.n_states, 4))
    table = ProfitTable(space=space, values=values)
    sol = backward_induction(table, tp_dynamic, tol=1e-13)
    o_inc, o_pe, o_v, o_vpe = _oracle_solution(space, values, tp_dynamic)
    np.testing.assert_allclose(sol.ccp_inc, o_inc, atol=1e-10)
    np.testing.assert_allclose(sol.ccp_pe, o_pe, atol=1e-10)
    np.testing.assert_allclose(sol.value_inc, o_v, atol=1e-10)
    np.testing.assert_allclose(sol.value_pe, o_vpe, atol=1e-10)
    assert time.perf_counter() - start < 5.0


# ---------------------------------------------------------------------------
# 5. Synthetic parameter recovery across 20 seeds
# ---------------------------------------------------------------------------

def test_parameter_recovery_and_interval_coverage():
    start = time.perf_counter()
    dyn = fixtures.DYNAMIC_FIXTURES["transpacific"]
    static = fixtures.STATIC_FIXTURES["transpacific"]
    demand = fixtures.demand_path("transpacific", 18)
    regimes = fixtures.regime_path(18)
    space = StateSpace(caps=(4, 3, 2, 1), n_pe=4)
    env = MarketEnvironment(space, static, demand, regimes, "transpacific")
    table = env.profit_table()
    coverage = {name: 0 for name in THETA_NAMES}
    recovered = 0
    seeds = range(101, 121)
    for seed in seeds:
        spec = io.SyntheticSpec(
            static_params=static, dynamic_params=dyn, market="transpacific",
            demand_states=demand, regimes=regimes, n_markets=30, seed=seed,
        )
        panel = io.generate_synthetic_panel(spec)
        result = estimate_dynamic(
            panel.observations, table, dyn, xatol=1e-4, fatol=1e-6, tol=1e-4,
        )
        intervals = lr_confidence_intervals(
            result.theta, result.log_likelihood, panel.observations, table,
            tol=1e-4,
        )
        for name in THETA_NAMES:
            lo, hi = intervals[name]
            if lo <= getattr(dyn, name) <= hi:
                coverage[name] += 1
        dev_psi = abs(result.theta.exit_cost / dyn.exit_cost - 1.0)
        dev_phi = abs(result.theta.operation_cost / dyn.operation_cost - 1.0)
        if dev_psi <= 0.15 and dev_phi <= 0.15:
            recovered += 1
    n = len(seeds)
    threshold = math.ceil(0.7 * n)
    assert recovered >= threshold, f"phi/psi within 15% in only {recovered}/{n} seeds"
    for name in THETA_NAMES:
        assert coverage[name] >= threshold, (
            f"90% interval for {name} covered truth in only {coverage[name]}/{n} seeds"
        )
    assert time.perf_counter() - start < 1800.0


# ---------------------------------------------------------------------------
# 6. Counterfactual signs
# ---------------------------------------------------------------------------

def test_removing_the_cartel_lowers_prices_and_producer_surplus():
    start = time.perf_counter()
    static = fixtures.STATIC_FIXTURES["transpacific"]
    dyn = fixtures.DYNAMIC_FIXTURES["transpacific"]
    demand = fixtures.demand_path("transpacific", 18)
    regimes = fixtures.regime_path(18)
    space = StateSpace(caps=(4, 3, 2, 1), n_pe=4)
    env = MarketEnvironment(space, static, demand, regimes, "transpacific")
    scenario = Scenario(ScenarioKind.NO_CARTEL)
    cf_env = MarketEnvironment(
        space, scenario.patch_static(static), demand, regimes, "transpacific")
    # price strictly below at every nonempty state in every collusive year
    for t in range(18):
        if not regimes[t].collusive:
            continue
        for state in space.states:
            if state.total_firms == 0:
                continue
            for base_out, cf_out in zip(env.outcomes(t, state),
                                        cf_env.outcomes(t, state)):
                assert cf_out.price < base_out.price
    # ensemble producer surplus falls over the strong-cartel window
    init = IndustryState(2, 1, 1, 0)
    base = run_scenario(Scenario(ScenarioKind.BASELINE), env, dyn, init,
                        n_sims=200, base_seed=0)
    cf = run_scenario(scenario, env, dyn, init, n_sims=200, base_seed=0)
    choke = 10.0 * ensemble_max_price(base.ensemble)
    base_w = welfare_by_regime(base.ensemble, base.env, choke, dyn.discount)
    cf_w = welfare_by_regime(cf.ensemble, cf.env, choke, dyn.discount)
    deltas = welfare_deltas(base_w, cf_w)
    assert deltas["producer_surplus"][0] < 0.0
    assert time.perf_counter() - start < 300.0


# ---------------------------------------------------------------------------
# 7. Profit monotonicity in capacity level
# ---------------------------------------------------------------------------

def test_level_upgrades_never_reduce_own_profit():
    start = time.perf_counter()
    static = fixtures.STATIC_FIXTURES["transpacific"]
    demand = fixtures.demand_path("transpacific", 1)[0]

    def level_profit(counts, level, regime):
        tonnages, levels = [], []
        for lvl, n in enumerate(counts, start=1):
            rep = fixtures_rep[lvl - 1]
            tonnages.extend([rep] * n)
            levels.extend([lvl] * n)
        outs = [
            equilibrium_outcome(
                RouteSnapshot(float(d), tuple(tonnages), regime), static,
                levels=levels,
            )
            for d in demand
        ]
        profits = market_profit(outs)
        return profits[levels.index(level)]

    from cartelsim.states import representative_tonnage
    fixtures_rep = [representative_tonnage(l, "transpacific") for l in (1, 2, 3, 4)]
    # A firm with no rivals internalizes the entire price decline caused by
    # its own capacity expansion; with inelastic demand (|alpha1| < 1) its
    # revenue then falls for any cost intercept, so the upgrade comparison is
    # only meaningful when at least one rival holds the price response small.
    states = [
        c for c in itertools.product(range(7), repeat=4) if 2 <= sum(c) <= 6
    ]
    for regime in (Regime.COLLUSIVE79, Regime.COMPETITIVE):
        for counts in states:
            for l in (1, 2, 3):
                if counts[l - 1] == 0:
                    continue
                upgraded = list(counts)
                upgraded[l - 1] -= 1
                upgraded[l] += 1
                before = level_profit(counts, l, regime)
                after = level_profit(upgraded, l + 1, regime)
                assert after >= before - 1e-9 * max(1.0, abs(before)), (
                    f"upgrade {l}->{l + 1} at {counts} ({regime}) lowers profit "
                    f"{before} -> {after}"
                )
    assert time.perf_counter() - start < 60.0


# ---------------------------------------------------------------------------
# 8. Determinism and round trips
# ---------------------------------------------------------------------------

def test_identical_config_and_seed_give_bit_identical_outputs(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(
        "[solver]\ncaps = [2, 1, 1, 0]\nn_potential_entrants = 2\n"
        "[simulation]\nhorizon = 6\nn_sims = 10\ninitial_state = [2, 1, 0, 0]\n"
        "base_seed = 11\n[synth]\nn_markets = 2\n"
    )
    outputs = {}
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["solve", "--config", str(cfg), "--out-dir", str(out)]) == 0
        assert main(["synth", "--config", str(cfg), "--out-dir", str(out)]) == 0
        assert main(["simulate", "--config", str(cfg), "--out-dir", str(out)]) == 0
        outputs[run] = {
            name: (out / name).read_bytes()
            for name in ("policy.csv", "route_year.csv", "firm.csv",
                         "baseline_mean_path.csv", "manifest.json")
        }
    assert outputs["a"] == outputs["b"]


def test_synthetic_panel_round_trip_is_lossless(tmp_path):
    dyn = fixtures.DYNAMIC_FIXTURES["transpacific"]
    static = fixtures.STATIC_FIXTURES["transpacific"]
    spec = io.SyntheticSpec(
        static_params=static, dynamic_params=dyn, market="transpacific",
        demand_states=fixtures.demand_path("transpacific", 8),
        regimes=fixtures.regime_path(8), n_markets=3, seed=5,
    )
    panel = io.generate_synthetic_panel(spec)
    io.save_firm_csv(tmp_path / "firm.csv", panel.firm_records)
    io.save_route_year_csv(tmp_path / "route.csv", panel.route_records)
    assert io.load_firm_csv(tmp_path / "firm.csv") == panel.firm_records
    assert io.load_route_year_csv(tmp_path / "route.csv") == panel.route_records
    rebuilt = io.tallies_from_firm_records(
        io.load_firm_csv(tmp_path / "firm.csv"),
        spec.n_potential_entrants, spec.base_year,
    )
    assert rebuilt == panel.observations
