"""Finite-horizon sequential-move entry/exit/investment game.

Each period is solved as a damped fixed point of conditional choice
probabilities (CCPs): the joint transition kernel implied by the current CCP
iterate prices every actor type's continuation values, new CCPs are the
logit of the choice-specific values, and each row moves to the midpoint of
old and new until the summed absolute gap falls below tolerance. Backward
induction chains the periods, ending at terminal values pi/(1-beta).

The per-period loop is numba-compiled; the readable probability laws it must
agree with live in :mod:`cartelsim.states`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numba import njit

from .errors import DomainError, SolverError
from .states import N_LEVELS, StateSpace
from . import statics
from .statics import AllocationRule, Regime, StaticParams
from .units import EULER_GAMMA, usd_to_cost_units

INCUMBENT_ACTIONS = ("x", "k", "b")
ENTRANT_ACTIONS = ("x", "e")

DEFAULT_CCP_TOL = 1e-6
DEFAULT_MAX_SWEEPS = 10_000

# Handling of the level-4 build action: "zero" pins its choice-specific value
# at exactly zero; "exclude" removes the action.
LEVEL4_BUILD_MODES = ("zero", "exclude")


@dataclass(frozen=True)
class DynamicParams:
    """Dynamic cost parameters, all in 100 billion USD."""

    exit_cost: float            # psi
    operation_cost: float       # phi
    entry_cost: float           # kappa^e
    invest_cost_low: float      # iota_1, charged at levels 1-2
    invest_cost_high: float     # iota_2, charged at level 3+
    logit_scale: float          # sigma > 0
    discount: float = 0.9       # beta in (0, 1)

    def validate(self) -> None:
        if not self.logit_scale > 0:
            raise DomainError(f"logit_scale must be positive, got {self.logit_scale}")
        if not 0 < self.discount < 1:
            raise DomainError(f"discount must lie in (0,1), got {self.discount}")

    def invest_cost(self, level: int) -> float:
        return self.invest_cost_low if level <= 2 else self.invest_cost_high


def per_period_cost(actor_level: int, action: str, params: DynamicParams) -> float:
    """Cost charged for one action; actor_level 0 is a potential entrant."""
    if actor_level == 0:
        if action == "x":
            return 0.0
        if action == "e":
            return params.entry_cost
        raise DomainError(f"entrants cannot take action {action!r}")
    if not 1 <= actor_level <= N_LEVELS:
        raise DomainError(f"bad actor level {actor_level}")
    if action == "x":
        return params.exit_cost
    if action == "k":
        return params.operation_cost
    if action == "b":
        return params.operation_cost + params.invest_cost(actor_level)
    raise DomainError(f"incumbents cannot take action {action!r}")


def terminal_value(profit: float, beta: float) -> float:
    """Perpetuity value pi/(1-beta) awarded in the last period."""
    if not 0 < beta < 1:
        raise DomainError(f"discount must lie in (0,1), got {beta}")
    return profit / (1.0 - beta)


def integrated_value(csvfs: Sequence[float], sigma: float) -> float:
    """E[max_a (V_a + sigma * eps_a)] with i.i.d. T1EV shocks.

    Closed form sigma * (euler_gamma + logsumexp(V/sigma)), computed with
    max subtraction.
    """
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    if len(csvfs) == 0:
        raise DomainError("need at least one action")
    v = np.asarray(csvfs, dtype=float) / sigma
    m = v.max()
    return sigma * (EULER_GAMMA + m + math.log(np.exp(v - m).sum()))


def _integrated_value_rows(csvfs: np.ndarray, sigma: float) -> np.ndarray:
    """Vectorized :func:`integrated_value` over rows of an (n, A) array."""
    v = csvfs / sigma
    m = v.max(axis=1)
    return sigma * (EULER_GAMMA + m + np.log(np.exp(v - m[:, None]).sum(axis=1)))


def ccp_from_csvf(csvfs: Sequence[float], sigma: float) -> np.ndarray:
    """Logit choice probabilities softmax(V/sigma), max-subtracted."""
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    v = np.asarray(csvfs, dtype=float) / sigma
    m = v.max()
    if not np.isfinite(m):
        raise DomainError("all choice-specific values are -inf")
    e = np.exp(v - m)
    return e / e.sum()


def expected_continuation(kernel_row: np.ndarray, next_values: np.ndarray) -> float:
    """Expectation of next-period values under one kernel row."""
    return float(np.dot(kernel_row, next_values))


@dataclass
class ProfitTable:
    """Static profit of a level-l firm at every (period, state), in 100bn USD."""

    space: StateSpace
    values: np.ndarray  # (T, S, 4)

    @property
    def horizon(self) -> int:
        return self.values.shape[0]


def build_profit_table(
    space: StateSpace,
    static_params: StaticParams,
    demand_states: np.ndarray,
    regimes: Sequence[Regime],
    market: str,
    rule: AllocationRule = AllocationRule(),
) -> ProfitTable:
    """Precompute level profits from the spot-market model.

    ``demand_states`` is (T, n_routes) of log demand states (eastbound and
    westbound of the round trip); market profit sums the route profits over
    the same firm roster built from representative tonnages. At states with
    no level-l firm the profit of a hypothetical level-l firm is evaluated
    by adding that firm to the roster, since continuation values can be
    queried there.
    """
    from .states import representative_tonnage

    demand_states = np.atleast_2d(np.asarray(demand_states, dtype=float))
    horizon = demand_states.shape[0]
    if len(regimes) != horizon:
        raise DomainError("need one regime per period")
    rep = [representative_tonnage(l, market) for l in range(1, N_LEVELS + 1)]
    values = np.zeros((horizon, space.n_states, N_LEVELS))
    cache: dict[tuple, tuple] = {}
    for t in range(horizon):
        regime = regimes[t]
        for si, st in enumerate(space.states):
            for l in range(1, N_LEVELS + 1):
                counts = list(st)
                if counts[l - 1] == 0:
                    counts[l - 1] = 1  # include the firm itself
                key = (tuple(counts), regime, tuple(demand_states[t]))
                if key not in cache:
                    tonnages, levels = [], []
                    for lvl, n in enumerate(counts, start=1):
                        tonnages.extend([rep[lvl - 1]] * n)
                        levels.extend([lvl] * n)
                    route_profits = []
                    for d in demand_states[t]:
                        snap = statics.RouteSnapshot(
                            demand_state=float(d),
                            tonnages=tuple(tonnages),
                            regime=regime,
                        )
                        out = statics.equilibrium_outcome(
                            snap, static_params, rule, levels
                        )
                        route_profits.append(out.firm_profits)
                    per_firm = [sum(p) for p in zip(*route_profits)]
                    by_level = {}
                    for lvl, pi in zip(levels, per_firm):
                        by_level.setdefault(lvl, pi)
                    cache[key] = by_level
                values[t, si, l - 1] = usd_to_cost_units(cache[key][l])
    return ProfitTable(space=space, values=values)


@dataclass
class PolicySolution:
    """Solved CCPs, continuation expectations, and values for every period.

    Choice probabilities exist for decision periods 0..T-2; values cover
    0..T-1 with the terminal row equal to pi/(1-beta). Incumbent actions are
    ordered (x, k, b), entrant actions (x, e).
    """

    space: StateSpace
    params: DynamicParams
    ccp_inc: np.ndarray     # (T-1, 4, S, 3)
    ccp_pe: np.ndarray      # (T-1, S, 2)
    ev_inc: np.ndarray      # (T-1, 4, S, 3) discounted continuation by action
    ev_pe: np.ndarray       # (T-1, S, 2)
    value_inc: np.ndarray   # (T, 4, S)
    value_pe: np.ndarray    # (T, S)

    @property
    def horizon(self) -> int:
        return self.value_inc.shape[0]


@njit(cache=True)
def _outcome_probs(out_state, out_ex, out_keep, out_build, out_coef, ccp):
    m = out_state.shape[0]
    probs = np.empty(m)
    for i in range(m):
        s = out_state[i]
        probs[i] = (
            out_coef[i]
            * ccp[s, 0] ** out_ex[i]
            * ccp[s, 1] ** out_keep[i]
            * ccp[s, 2] ** out_build[i]
        )
    return probs


@njit(cache=True)
def _entrant_probs(pe_state, pe_entries, pe_coef, n_pe, ccp):
    m = pe_state.shape[0]
    probs = np.empty(m)
    for i in range(m):
        s = pe_state[i]
        e = pe_entries[i]
        probs[i] = pe_coef[i] * ccp[s, 1] ** e * ccp[s, 0] ** (n_pe - e)
    return probs


@njit(cache=True)
def _build_kernel(
    n_states,
    combo_src,
    combo_dst,
    combo_out,
    combo_pe,
    outp0,
    outp1,
    outp2,
    outp3,
    outpe,
):
    kernel = np.zeros((n_states, n_states))
    for j in range(combo_src.shape[0]):
        p = (
            outp0[combo_out[j, 0]]
            * outp1[combo_out[j, 1]]
            * outp2[combo_out[j, 2]]
            * outp3[combo_out[j, 3]]
            * outpe[combo_pe[j]]
        )
        kernel[combo_src[j], combo_dst[j]] += p
    return kernel


@njit(cache=True)
def _softmax_rows(v, sigma):
    n, a = v.shape
    out = np.empty((n, a))
    for i in range(n):
        m = v[i, 0]
        for j in range(1, a):
            if v[i, j] > m:
                m = v[i, j]
        tot = 0.0
        for j in range(a):
            out[i, j] = np.exp((v[i, j] - m) / sigma)
            tot += out[i, j]
        for j in range(a):
            out[i, j] /= tot
    return out


@njit(cache=True)
def _csvfs_from_kernel(
    kernel, v_next, v_next_pe_entry, psi, phi, kappa, iota1, iota2, beta, level4_exclude
):
    """Choice-specific values for all levels and entrants given one kernel.

    v_next is (4, S) incumbent values at t+1; entry continuation enters at
    level 1. Returns (csvf_inc (4,S,3), csvf_pe (S,2), ev_inc, ev_pe).
    """
    n_states = kernel.shape[0]
    csvf_inc = np.empty((N_LEVELS, n_states, 3))
    ev_inc = np.zeros((N_LEVELS, n_states, 3))
    for l in range(N_LEVELS):
        ev_keep = kernel @ v_next[l]
        if l < N_LEVELS - 1:
            ev_build = kernel @ v_next[l + 1]
        else:
            ev_build = np.zeros(n_states)
        iota = iota1 if l < 2 else iota2
        for s in range(n_states):
            csvf_inc[l, s, 0] = -psi
            csvf_inc[l, s, 1] = -phi + beta * ev_keep[s]
            ev_inc[l, s, 1] = beta * ev_keep[s]
            if l < N_LEVELS - 1:
                csvf_inc[l, s, 2] = -phi - iota + beta * ev_build[s]
                ev_inc[l, s, 2] = beta * ev_build[s]
            elif level4_exclude:
                csvf_inc[l, s, 2] = -np.inf
            else:
                csvf_inc[l, s, 2] = 0.0
    ev_entry = kernel @ v_next_pe_entry
    csvf_pe = np.empty((n_states, 2))
    ev_pe = np.zeros((n_states, 2))
    for s in range(n_states):
        csvf_pe[s, 0] = 0.0
        csvf_pe[s, 1] = -kappa + beta * ev_entry[s]
        ev_pe[s, 1] = beta * ev_entry[s]
    return csvf_inc, csvf_pe, ev_inc, ev_pe


@njit(cache=True)
def _period_fixed_point(
    n_states,
    combo_src,
    combo_dst,
    combo_out,
    combo_pe,
    out_state0, out_ex0, out_keep0, out_build0, out_coef0,
    out_state1, out_ex1, out_keep1, out_build1, out_coef1,
    out_state2, out_ex2, out_keep2, out_build2, out_coef2,
    out_state3, out_ex3, out_keep3, out_build3, out_coef3,
    pe_state, pe_entries, pe_coef, n_pe,
    v_next,
    ccp_inc,
    ccp_pe,
    psi, phi, kappa, iota1, iota2, sigma, beta,
    tol,
    max_sweeps,
    level4_exclude,
):
    """Damped CCP fixed point for one period; ccp arrays are updated in place.

    Sweeps level 4 down to level 1 then entrants, rebuilding the joint kernel
    from the current iterate once per sweep, and moving every CCP row halfway
    toward its logit best response. When the gap stops shrinking (the
    best-response map can be expansive for small logit scales, turning the
    midpoint step into a 2-cycle) the step weight is halved until progress
    resumes. Returns (sweeps_used, last_gap); a negative sweep count flags
    non-convergence.
    """
    gap = np.inf
    sweeps = 0
    weight = 0.5
    best_gap = np.inf
    stalled = 0
    while sweeps < max_sweeps:
        sweeps += 1
        outp0 = _outcome_probs(out_state0, out_ex0, out_keep0, out_build0, out_coef0, ccp_inc[0])
        outp1 = _outcome_probs(out_state1, out_ex1, out_keep1, out_build1, out_coef1, ccp_inc[1])
        outp2 = _outcome_probs(out_state2, out_ex2, out_keep2, out_build2, out_coef2, ccp_inc[2])
        outp3 = _outcome_probs(out_state3, out_ex3, out_keep3, out_build3, out_coef3, ccp_inc[3])
        outpe = _entrant_probs(pe_state, pe_entries, pe_coef, n_pe, ccp_pe)
        kernel = _build_kernel(
            n_states, combo_src, combo_dst, combo_out, combo_pe,
            outp0, outp1, outp2, outp3, outpe,
        )
        csvf_inc, csvf_pe, _, _ = _csvfs_from_kernel(
            kernel, v_next[:N_LEVELS], v_next[0], psi, phi, kappa, iota1, iota2,
            beta, level4_exclude,
        )
        gap = 0.0
        for l in range(N_LEVELS - 1, -1, -1):
            new = _softmax_rows(csvf_inc[l], sigma)
            for s in range(n_states):
                for a in range(3):
                    gap += abs(new[s, a] - ccp_inc[l, s, a])
                    ccp_inc[l, s, a] = (
                        weight * new[s, a] + (1.0 - weight) * ccp_inc[l, s, a]
                    )
        new_pe = _softmax_rows(csvf_pe, sigma)
        for s in range(n_states):
            for a in range(2):
                gap += abs(new_pe[s, a] - ccp_pe[s, a])
                ccp_pe[s, a] = weight * new_pe[s, a] + (1.0 - weight) * ccp_pe[s, a]
        if gap < tol:
            return sweeps, gap
        if gap < 0.999 * best_gap:
            best_gap = gap
            stalled = 0
        else:
            stalled += 1
            if stalled >= 20 and weight > 1.0 / 64.0:
                weight *= 0.5
                stalled = 0
    return -sweeps, gap


def _myopic_ccps(
    space: StateSpace, params: DynamicParams, level4_exclude: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Cost-only softmax rows used to seed the first fixed point."""
    ccp_inc = np.empty((N_LEVELS, space.n_states, 3))
    for l in range(1, N_LEVELS + 1):
        v = [-params.exit_cost, -params.operation_cost]
        if l == N_LEVELS:
            if level4_exclude:
                row = ccp_from_csvf(v, params.logit_scale)
                row = np.append(row, 0.0)
                ccp_inc[l - 1, :, :] = row
                continue
            v.append(0.0)
        else:
            v.append(-params.operation_cost - params.invest_cost(l))
        ccp_inc[l - 1, :, :] = ccp_from_csvf(v, params.logit_scale)
    ccp_pe = np.empty((space.n_states, 2))
    ccp_pe[:, :] = ccp_from_csvf([0.0, -params.entry_cost], params.logit_scale)
    return ccp_inc, ccp_pe


def build_kernel(
    space: StateSpace, ccp_inc: np.ndarray, ccp_pe: np.ndarray
) -> np.ndarray:
    """Joint transition kernel (S, S) for one CCP iterate."""
    tb = space.tables
    outp = [
        _outcome_probs(tb.out_state[l], tb.out_ex[l], tb.out_keep[l],
                       tb.out_build[l], tb.out_coef[l], ccp_inc[l])
        for l in range(N_LEVELS)
    ]
    outpe = _entrant_probs(tb.pe_state, tb.pe_entries, tb.pe_coef, space.n_pe, ccp_pe)
    return _build_kernel(
        space.n_states, tb.combo_src, tb.combo_dst, tb.combo_out, tb.combo_pe,
        outp[0], outp[1], outp[2], outp[3], outpe,
    )


def solve_period_fixed_point(
    space: StateSpace,
    params: DynamicParams,
    next_values: np.ndarray,
    init_ccp_inc: np.ndarray | None = None,
    init_ccp_pe: np.ndarray | None = None,
    tol: float = DEFAULT_CCP_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    level4_build: str = "zero",
) -> tuple[np.ndarray, ...]:
    """One period's equilibrium CCPs given next-period incumbent values.

    Returns (ccp_inc, ccp_pe, csvf_inc, csvf_pe, kernel, ev_inc, ev_pe),
    where the CCPs are
    the exact logit of the choice-specific values computed at the converged
    kernel.
    """
    params.validate()
    if level4_build not in LEVEL4_BUILD_MODES:
        raise DomainError(f"level4_build must be one of {LEVEL4_BUILD_MODES}")
    exclude = level4_build == "exclude"
    tb = space.tables
    if init_ccp_inc is None or init_ccp_pe is None:
        ccp_inc, ccp_pe = _myopic_ccps(space, params, exclude)
    else:
        ccp_inc, ccp_pe = init_ccp_inc.copy(), init_ccp_pe.copy()
    v_next = np.ascontiguousarray(next_values, dtype=float)
    sweeps, gap = _period_fixed_point(
        space.n_states, tb.combo_src, tb.combo_dst, tb.combo_out, tb.combo_pe,
        tb.out_state[0], tb.out_ex[0], tb.out_keep[0], tb.out_build[0], tb.out_coef[0],
        tb.out_state[1], tb.out_ex[1], tb.out_keep[1], tb.out_build[1], tb.out_coef[1],
        tb.out_state[2], tb.out_ex[2], tb.out_keep[2], tb.out_build[2], tb.out_coef[2],
        tb.out_state[3], tb.out_ex[3], tb.out_keep[3], tb.out_build[3], tb.out_coef[3],
        tb.pe_state, tb.pe_entries, tb.pe_coef, space.n_pe,
        v_next, ccp_inc, ccp_pe,
        params.exit_cost, params.operation_cost, params.entry_cost,
        params.invest_cost_low, params.invest_cost_high,
        params.logit_scale, params.discount,
        tol, max_sweeps, exclude,
    )
    if sweeps < 0:
        raise SolverError(
            f"CCP fixed point did not converge in {max_sweeps} sweeps (gap {gap:.3e})"
        )
    # Evaluate the converged point exactly: kernel from the iterate, then
    # undamped logit rows consistent with the stored value functions.
    kernel = build_kernel(space, ccp_inc, ccp_pe)
    csvf_inc, csvf_pe, ev_inc, ev_pe = _csvfs_from_kernel(
        kernel, v_next[:N_LEVELS], v_next[0],
        params.exit_cost, params.operation_cost, params.entry_cost,
        params.invest_cost_low, params.invest_cost_high, params.discount, exclude,
    )
    for l in range(N_LEVELS):
        ccp_inc[l] = _softmax_rows(csvf_inc[l], params.logit_scale)
    ccp_pe[:] = _softmax_rows(csvf_pe, params.logit_scale)
    return ccp_inc, ccp_pe, csvf_inc, csvf_pe, kernel, ev_inc, ev_pe


def backward_induction(
    profit_table: ProfitTable,
    params: DynamicParams,
    tol: float = DEFAULT_CCP_TOL,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    level4_build: str = "zero",
    init: PolicySolution | None = None,
) -> PolicySolution:
    """Solve all periods back from the terminal perpetuity values.

    ``init`` warm-starts each period's fixed point with a previous
    solution's CCPs (useful when re-solving at nearby parameters); the
    converged point does not depend on the starting iterate beyond the
    stopping tolerance.
    """
    params.validate()
    space = profit_table.space
    horizon = profit_table.horizon
    if horizon < 2:
        raise DomainError("horizon must cover at least two periods")
    n_states = space.n_states
    sigma, beta = params.logit_scale, params.discount

    value_inc = np.zeros((horizon, N_LEVELS, n_states))
    value_pe = np.zeros((horizon, n_states))
    ccp_inc = np.zeros((horizon - 1, N_LEVELS, n_states, 3))
    ccp_pe = np.zeros((horizon - 1, n_states, 2))
    ev_inc = np.zeros((horizon - 1, N_LEVELS, n_states, 3))
    ev_pe = np.zeros((horizon - 1, n_states, 2))

    for l in range(N_LEVELS):
        value_inc[horizon - 1, l] = profit_table.values[horizon - 1, :, l] / (1.0 - beta)

    init_inc, init_pe = None, None
    for t in range(horizon - 2, -1, -1):
        if init is not None and t < init.ccp_inc.shape[0]:
            init_inc, init_pe = init.ccp_inc[t], init.ccp_pe[t]
        res = solve_period_fixed_point(
            space, params, value_inc[t + 1],
            init_ccp_inc=init_inc, init_ccp_pe=init_pe,
            tol=tol, max_sweeps=max_sweeps, level4_build=level4_build,
        )
        ccp_inc[t], ccp_pe[t], csvf_inc, csvf_pe, _, ev_inc[t], ev_pe[t] = res
        value_inc[t] = profit_table.values[t].T + _integrated_value_rows(
            csvf_inc.reshape(-1, 3), sigma
        ).reshape(N_LEVELS, n_states)
        value_pe[t] = _integrated_value_rows(csvf_pe, sigma)
        init_inc, init_pe = ccp_inc[t], ccp_pe[t]  # warm start for t-1

    return PolicySolution(
        space=space, params=params,
        ccp_inc=ccp_inc, ccp_pe=ccp_pe,
        ev_inc=ev_inc, ev_pe=ev_pe,
        value_inc=value_inc, value_pe=value_pe,
    )
