"""Static panel regressions and nested-fixed-point maximum likelihood.

The static side is within-transformed OLS/2SLS with cluster-robust standard
errors; its outputs compose the demand states and route-level supply
intercepts consumed by the profit table. The dynamic side maximizes the
multinomial action-profile likelihood, re-solving the full game by backward
induction at every candidate parameter vector (Nelder-Mead outer loop), and
inverts the likelihood ratio on a grid for confidence intervals.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import optimize, stats

from .dynamics import DynamicParams, PolicySolution, ProfitTable, backward_induction
from .errors import ConfigError, EstimationError, SolverError
from .states import (
    ActionTally,
    IndustryState,
    entrant_profile_prob,
    level_profile_prob,
    N_LEVELS,
)

# Likelihood value substituted when a candidate theta is infeasible.
NONFINITE_PENALTY = -1e12

WEAK_INSTRUMENT_F = 10.0


# ---------------------------------------------------------------------------
# Panel regressions
# ---------------------------------------------------------------------------

@dataclass
class RegressionReport:
    """Coefficients plus cluster-robust inference for one (within-)regression."""

    names: tuple[str, ...]
    coef: np.ndarray
    se: np.ndarray
    resid: np.ndarray
    nobs: int
    r_squared: float
    fixed_effects: dict | None = None      # group -> recovered intercept
    first_stage_f: float | None = None
    weak_instruments: bool = False

    def __getitem__(self, name: str) -> float:
        try:
            return float(self.coef[self.names.index(name)])
        except ValueError:
            raise ConfigError(f"report has no coefficient {name!r}") from None


def _within_transform(arr: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Subtract group means column-wise (one-way fixed effects)."""
    out = np.array(arr, dtype=float)
    for g in np.unique(groups):
        mask = groups == g
        out[mask] -= out[mask].mean(axis=0)
    return out


def _check_rank(x: np.ndarray, names: Sequence[str]) -> None:
    bad = [n for j, n in enumerate(names) if np.allclose(x[:, j], 0.0)]
    if bad:
        raise EstimationError(
            f"columns collinear with the fixed effects (constant within groups): {bad}"
        )
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise EstimationError(f"design matrix is rank deficient; columns {list(names)}")


def _cluster_cov(
    x: np.ndarray, resid: np.ndarray, clusters: np.ndarray | None
) -> np.ndarray:
    """Sandwich covariance, clustered when a grouping is supplied.

    Small-sample correction G/(G-1) * (N-1)/(N-K) with K the column count.
    """
    n, k = x.shape
    bread = np.linalg.inv(x.T @ x)
    if clusters is None:
        meat = x.T @ (x * resid[:, None] ** 2)
        corr = n / max(n - k, 1)
    else:
        labels = np.unique(clusters)
        g = len(labels)
        meat = np.zeros((k, k))
        for lab in labels:
            xg = x[clusters == lab]
            ug = resid[clusters == lab]
            score = xg.T @ ug
            meat += np.outer(score, score)
        corr = (g / (g - 1)) * ((n - 1) / max(n - k, 1))
    return corr * bread @ meat @ bread


def _recover_fixed_effects(
    y: np.ndarray, x: np.ndarray, beta: np.ndarray, groups: np.ndarray
) -> dict:
    resid = y - x @ beta
    return {g: float(resid[groups == g].mean()) for g in np.unique(groups)}


def ols_panel(
    y: np.ndarray,
    regressors: np.ndarray,
    names: Sequence[str],
    fixed_effect_group: np.ndarray | None = None,
    cluster_group: np.ndarray | None = None,
) -> RegressionReport:
    """Within-transformed OLS with cluster-robust standard errors."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(regressors, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(names) != x.shape[1]:
        raise ConfigError("one name per regressor column required")
    yw, xw = y, x
    if fixed_effect_group is not None:
        fixed_effect_group = np.asarray(fixed_effect_group)
        yw = _within_transform(y[:, None], fixed_effect_group)[:, 0]
        xw = _within_transform(x, fixed_effect_group)
    _check_rank(xw, names)
    beta, *_ = np.linalg.lstsq(xw, yw, rcond=None)
    resid = yw - xw @ beta
    cov = _cluster_cov(xw, resid, None if cluster_group is None else np.asarray(cluster_group))
    tss = float(((yw - yw.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 1.0
    fe = None
    if fixed_effect_group is not None:
        fe = _recover_fixed_effects(y, x, beta, fixed_effect_group)
    return RegressionReport(
        names=tuple(names), coef=beta, se=np.sqrt(np.diag(cov)),
        resid=resid, nobs=len(y), r_squared=r2, fixed_effects=fe,
    )


def tsls_panel(
    y: np.ndarray,
    endogenous: np.ndarray,
    exogenous: np.ndarray | None,
    instruments: np.ndarray,
    names: Sequence[str],
    fixed_effect_group: np.ndarray | None = None,
    cluster_group: np.ndarray | None = None,
) -> RegressionReport:
    """Two-stage least squares on within-transformed data.

    ``names`` covers the endogenous columns first, then the exogenous ones.
    Standard errors use 2SLS residuals (actual, not fitted, endogenous
    regressors) in the sandwich. The first-stage F statistic tests the
    excluded instruments jointly in the first endogenous column's first stage.
    """
    y = np.asarray(y, dtype=float)
    xe = np.atleast_2d(np.asarray(endogenous, dtype=float).T).T
    xo = (
        np.empty((len(y), 0))
        if exogenous is None
        else np.atleast_2d(np.asarray(exogenous, dtype=float).T).T
    )
    z_ex = np.atleast_2d(np.asarray(instruments, dtype=float).T).T
    if z_ex.shape[1] < xe.shape[1]:
        raise EstimationError("need at least as many instruments as endogenous columns")
    x = np.hstack([xe, xo])
    if len(names) != x.shape[1]:
        raise ConfigError("one name per regressor column required")
    z = np.hstack([z_ex, xo])
    if fixed_effect_group is not None:
        fixed_effect_group = np.asarray(fixed_effect_group)
        yw = _within_transform(y[:, None], fixed_effect_group)[:, 0]
        xw = _within_transform(x, fixed_effect_group)
        zw = _within_transform(z, fixed_effect_group)
    else:
        yw, xw, zw = y, x, z
    _check_rank(xw, names)
    _check_rank(zw, [f"iv{j}" for j in range(zw.shape[1])])

    # First stage: project each endogenous column on the instrument set.
    pz = zw @ np.linalg.solve(zw.T @ zw, zw.T)
    x_hat = xw.copy()
    x_hat[:, : xe.shape[1]] = pz @ xw[:, : xe.shape[1]]
    beta, *_ = np.linalg.lstsq(x_hat, yw, rcond=None)
    resid = yw - xw @ beta

    clusters = None if cluster_group is None else np.asarray(cluster_group)
    a = np.linalg.inv(x_hat.T @ x_hat)
    n, k = x_hat.shape
    if clusters is None:
        meat = x_hat.T @ (x_hat * resid[:, None] ** 2)
        corr = n / max(n - k, 1)
    else:
        meat = np.zeros((k, k))
        labels = np.unique(clusters)
        for lab in labels:
            score = x_hat[clusters == lab].T @ resid[clusters == lab]
            meat += np.outer(score, score)
        corr = (len(labels) / (len(labels) - 1)) * ((n - 1) / max(n - k, 1))
    cov = corr * a @ meat @ a

    # Joint F on the excluded instruments for the first endogenous column.
    fs = ols_panel(
        xw[:, 0], zw, [f"iv{j}" for j in range(zw.shape[1])],
        cluster_group=clusters,
    )
    q = z_ex.shape[1]
    vz = _cluster_cov(zw, fs.resid, clusters)[:q, :q]
    bz = fs.coef[:q]
    fstat = float(bz @ np.linalg.solve(vz, bz)) / q

    tss = float(((yw - yw.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else 1.0
    fe = None
    if fixed_effect_group is not None:
        fe = _recover_fixed_effects(y, x, beta, fixed_effect_group)
    return RegressionReport(
        names=tuple(names), coef=beta, se=np.sqrt(np.diag(cov)),
        resid=resid, nobs=len(y), r_squared=r2, fixed_effects=fe,
        first_stage_f=fstat, weak_instruments=fstat < WEAK_INSTRUMENT_F,
    )


def demand_state(
    report: RegressionReport, log_gdp: float, year: int, route: str
) -> float:
    """Log demand state: covariate and period effects plus the route effect.

    D = a_gdp * X + a_pre80 * 1(year<=1979) + a_80_83 * 1(1980<=year<=1983)
    + a_route. The price term is excluded by construction.
    """
    if report.fixed_effects is None or route not in report.fixed_effects:
        raise ConfigError(f"demand report has no fixed effect for route {route!r}")
    d = report["log_gdp"] * log_gdp + report.fixed_effects[route]
    if year <= 1979:
        d += report["pre1980"]
    elif year <= 1983:
        d += report["y1980_83"]
    return float(d)


def supply_intercept(
    report: RegressionReport, cost_shifters: Mapping[str, float], route: str
) -> float:
    """Effective supply intercept: route effect plus cost-shifter terms."""
    if report.fixed_effects is None or route not in report.fixed_effects:
        raise ConfigError(f"supply report has no fixed effect for route {route!r}")
    g0 = report.fixed_effects[route]
    for name, value in cost_shifters.items():
        g0 += report[name] * value
    return float(g0)


# ---------------------------------------------------------------------------
# Dynamic likelihood
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObservedTransition:
    """One market-year observation: prevailing state and realized actions."""

    market: str
    year_index: int          # decision period, 0-based
    state: IndustryState
    tally: ActionTally

    def __post_init__(self):
        self.tally.validate(self.state)


@dataclass
class EstimationResult:
    theta: DynamicParams
    log_likelihood: float
    n_evaluations: int
    converged: bool
    trace: list = field(default_factory=list)   # (eval #, ll) pairs


def _theta_to_vector(theta: DynamicParams) -> np.ndarray:
    return np.array([
        theta.exit_cost, theta.operation_cost, theta.entry_cost,
        theta.invest_cost_low, theta.invest_cost_high,
        math.log(theta.logit_scale),
    ])


def _vector_to_theta(x: np.ndarray, discount: float) -> DynamicParams:
    return DynamicParams(
        exit_cost=float(x[0]), operation_cost=float(x[1]), entry_cost=float(x[2]),
        invest_cost_low=float(x[3]), invest_cost_high=float(x[4]),
        logit_scale=float(math.exp(x[5])), discount=discount,
    )


def _tables_by_market(
    observations: Sequence[ObservedTransition],
    profit_table: ProfitTable | Mapping[str, ProfitTable],
) -> dict[str, ProfitTable]:
    markets = {o.market for o in observations}
    if isinstance(profit_table, ProfitTable):
        return {m: profit_table for m in markets}
    missing = markets - set(profit_table)
    if missing:
        raise ConfigError(f"no profit table for markets {sorted(missing)}")
    return {m: profit_table[m] for m in markets}


def _solution_log_likelihood(
    solution: PolicySolution, observations: Sequence[ObservedTransition]
) -> float:
    """Sum of log multinomial action-profile probabilities over observations."""
    space = solution.space
    total = 0.0
    for obs in observations:
        si = space.index(obs.state)
        t = obs.year_index
        if not 0 <= t < solution.ccp_inc.shape[0]:
            raise ConfigError(
                f"year index {t} outside the solved decision horizon"
            )
        for l in range(N_LEVELS):
            n = obs.state[l]
            if n == 0:
                continue
            prob = level_profile_prob(n, solution.ccp_inc[t, l, si])[
                (obs.tally.exits[l], obs.tally.builds[l])
            ]
            total += math.log(prob) if prob > 0 else -math.inf
        prob = entrant_profile_prob(space.n_pe, solution.ccp_pe[t, si])[
            obs.tally.entrant_entries
        ]
        total += math.log(prob) if prob > 0 else -math.inf
    return total


class ObservationCache:
    """Precomputed count arrays for fast repeated likelihood evaluation.

    Stores, for the observations sharing one profit table, the state/period
    indices, per-level action counts, and the log multinomial coefficients,
    so one evaluation is a handful of vectorized gathers. Numerically
    identical to summing log level_profile_prob / entrant_profile_prob
    terms (cross-checked in the test suite).
    """

    def __init__(self, observations: Sequence[ObservedTransition], space) -> None:
        n = len(observations)
        self.t_idx = np.array([o.year_index for o in observations])
        self.s_idx = np.array([space.index(o.state) for o in observations])
        self.n_l = np.array([[o.state[l] for l in range(N_LEVELS)] for o in observations])
        self.ex_l = np.array([[o.tally.exits[l] for l in range(N_LEVELS)] for o in observations])
        self.b_l = np.array([[o.tally.builds[l] for l in range(N_LEVELS)] for o in observations])
        self.k_l = self.n_l - self.ex_l - self.b_l
        self.entries = np.array([o.tally.entrant_entries for o in observations])
        self.log_coef = np.zeros(n)
        for i, o in enumerate(observations):
            for l in range(N_LEVELS):
                self.log_coef[i] += math.log(
                    math.comb(o.state[l], o.tally.exits[l])
                    * math.comb(o.state[l] - o.tally.exits[l], o.tally.builds[l])
                )
            self.log_coef[i] += math.log(math.comb(space.n_pe, o.tally.entrant_entries))

    def log_likelihood(self, solution: PolicySolution) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            log_ccp = np.log(solution.ccp_inc[self.t_idx, :, self.s_idx, :])  # (n,4,3)
            log_pe = np.log(solution.ccp_pe[self.t_idx, self.s_idx, :])       # (n,2)
        counts = np.stack([self.ex_l, self.k_l, self.b_l], axis=-1)           # (n,4,3)
        terms = np.where(counts > 0, counts * log_ccp, 0.0)
        pe_counts = np.stack(
            [solution.space.n_pe - self.entries, self.entries], axis=-1
        )
        pe_terms = np.where(pe_counts > 0, pe_counts * log_pe, 0.0)
        return float(self.log_coef.sum() + terms.sum() + pe_terms.sum())


def dynamic_log_likelihood(
    theta: DynamicParams,
    observations: Sequence[ObservedTransition],
    profit_table: ProfitTable | Mapping[str, ProfitTable],
    warm_start: dict[int, PolicySolution] | None = None,
    caches: dict[int, ObservationCache] | None = None,
    **solver_options,
) -> float:
    """Joint log-likelihood of observed action profiles at one theta.

    Re-solves the game by backward induction for every distinct profit table
    (markets sharing a table share a solution). Solver failures and
    non-finite values return the documented penalty instead of raising, so
    the outer optimizer can step away. ``warm_start`` optionally carries CCP
    solutions between calls, keyed by profit-table identity.
    """
    tables = _tables_by_market(observations, profit_table)
    solutions: dict[int, PolicySolution] = {}
    obs_by_key: dict[int, list[ObservedTransition]] = {}
    for obs in observations:
        obs_by_key.setdefault(id(tables[obs.market]), []).append(obs)
    total = 0.0
    try:
        for market, table in tables.items():
            key = id(table)
            if key in solutions:
                continue
            init = warm_start.get(key) if warm_start else None
            solutions[key] = backward_induction(table, theta, init=init, **solver_options)
            if caches is not None:
                if key not in caches:
                    caches[key] = ObservationCache(obs_by_key[key], table.space)
                total += caches[key].log_likelihood(solutions[key])
            else:
                total += _solution_log_likelihood(solutions[key], obs_by_key[key])
    except (SolverError, OverflowError, ValueError):
        return NONFINITE_PENALTY
    if warm_start is not None:
        warm_start.update(solutions)
    return total if math.isfinite(total) else NONFINITE_PENALTY


def estimate_dynamic(
    observations: Sequence[ObservedTransition],
    profit_table: ProfitTable | Mapping[str, ProfitTable],
    theta_init: DynamicParams,
    max_evaluations: int = 2000,
    xatol: float = 1e-5,
    fatol: float = 1e-7,
    **solver_options,
) -> EstimationResult:
    """Nelder-Mead maximum likelihood over the six dynamic cost parameters.

    The simplex moves (exit, operation, entry, invest-low, invest-high,
    log scale); the discount factor stays at its supplied value. The initial
    simplex perturbs each coordinate by 10% (at least 0.01).
    """
    theta_init.validate()
    x0 = _theta_to_vector(theta_init)
    simplex = np.tile(x0, (len(x0) + 1, 1))
    for j in range(len(x0)):
        simplex[j + 1, j] += max(0.1 * abs(x0[j]), 0.01)

    trace: list[tuple[int, float]] = []
    warm: dict[int, PolicySolution] = {}
    caches: dict[int, ObservationCache] = {}

    def negative_ll(x: np.ndarray) -> float:
        theta = _vector_to_theta(x, theta_init.discount)
        ll = dynamic_log_likelihood(
            theta, observations, profit_table,
            warm_start=warm, caches=caches, **solver_options
        )
        trace.append((len(trace) + 1, ll))
        return -ll

    res = optimize.minimize(
        negative_ll, x0, method="Nelder-Mead",
        options={
            "initial_simplex": simplex, "xatol": xatol, "fatol": fatol,
            "maxfev": max_evaluations, "adaptive": True,
        },
    )
    return EstimationResult(
        theta=_vector_to_theta(res.x, theta_init.discount),
        log_likelihood=-float(res.fun),
        n_evaluations=int(res.nfev),
        converged=bool(res.success),
        trace=trace,
    )


# Parameter names in reporting order; "logit_scale" is gridded in levels.
THETA_NAMES = (
    "exit_cost", "operation_cost", "entry_cost",
    "invest_cost_low", "invest_cost_high", "logit_scale",
)


def observed_information(
    theta_hat: DynamicParams,
    observations: Sequence[ObservedTransition],
    profit_table: ProfitTable | Mapping[str, ProfitTable],
    step: float = 1e-3,
    warm_start: dict | None = None,
    caches: dict | None = None,
    **solver_options,
) -> np.ndarray:
    """Negative Hessian of the log likelihood at the estimate.

    Central finite differences in the internal parameter vector (costs in
    levels, logit scale in logs). Used to trace how the remaining
    parameters co-move when one is perturbed.
    """
    warm = warm_start if warm_start is not None else {}
    cch = caches if caches is not None else {}
    x0 = _theta_to_vector(theta_hat)
    n = x0.size

    def f(x: np.ndarray) -> float:
        theta = _vector_to_theta(x, theta_hat.discount)
        return dynamic_log_likelihood(
            theta, observations, profit_table,
            warm_start=warm, caches=cch, **solver_options
        )

    hess = np.zeros((n, n))
    f0 = f(x0)
    fp = np.zeros(n)
    fm = np.zeros(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        fp[i] = f(x0 + e)
        fm[i] = f(x0 - e)
        hess[i, i] = (fp[i] - 2.0 * f0 + fm[i]) / step**2
    for i in range(n):
        for j in range(i + 1, n):
            ei = np.zeros(n)
            ei[i] = step
            ej = np.zeros(n)
            ej[j] = step
            hess[i, j] = hess[j, i] = (
                f(x0 + ei + ej) - fp[i] - fp[j] + 2.0 * f0
                - fm[i] - fm[j] + f(x0 - ei - ej)
            ) / (2.0 * step**2)
    return -hess


def _profile_directions(info: np.ndarray) -> np.ndarray:
    """Column j gives how the full parameter vector moves per unit change
    in parameter j along the likelihood ridge (regression adjustment from
    the observed information). Falls back to coordinate directions when
    the information matrix is not positive definite."""
    n = info.shape[0]
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return np.eye(n)
    diag = np.diag(cov)
    if not np.all(np.isfinite(cov)) or np.any(diag <= 0):
        return np.eye(n)
    dirs = cov / diag[np.newaxis, :]
    dirs[np.arange(n), np.arange(n)] = 1.0
    return dirs


def lr_confidence_intervals(
    theta_hat: DynamicParams,
    ll_hat: float,
    observations: Sequence[ObservedTransition],
    profit_table: ProfitTable | Mapping[str, ProfitTable],
    level: float = 0.90,
    n_grid: int = 11,
    half_width_frac: float = 0.5,
    half_width_floor: float = 0.01,
    adjust_others: bool = True,
    **solver_options,
) -> dict[str, tuple[float, float]]:
    """Likelihood-ratio intervals from a per-parameter grid.

    Each parameter is varied on an ``n_grid``-point grid centered at the
    estimate (half-width 50% of its magnitude, floor 0.01). The interval
    spans the contiguous grid region around the estimate where
    2*(ll_hat - ll) stays below the chi-square(1) critical value, with
    each endpoint refined by linear interpolation of the LR statistic
    between the last accepted and first rejected grid point (the crossing
    usually falls between grid points, so the reported interval has
    sub-grid resolution). A center-rejected grid degenerates to the point
    estimate.

    With ``adjust_others=True`` (the default) the remaining parameters
    follow the likelihood ridge as the gridded one moves: the adjustment
    direction comes from the observed information matrix, so the grid
    traces a local approximation to the profile likelihood. Holding the
    others literally fixed (``adjust_others=False``) understates the
    uncertainty whenever parameters are correlated, which makes the
    resulting intervals undercover badly; the adjusted variant restores
    the nominal coverage while still inverting actual likelihood-ratio
    evaluations rather than a quadratic approximation.
    """
    if not 0 < level < 1:
        raise ConfigError(f"confidence level must lie in (0,1), got {level}")
    crit = float(stats.chi2.ppf(level, df=1))
    hat_vec = _theta_to_vector(theta_hat)  # internal: logit scale in logs
    hat = hat_vec.copy()
    hat[5] = theta_hat.logit_scale  # grid sigma in levels, not logs
    warm: dict[int, PolicySolution] = {}
    caches: dict[int, ObservationCache] = {}
    if adjust_others:
        info = observed_information(
            theta_hat, observations, profit_table,
            warm_start=warm, caches=caches, **solver_options
        )
        directions = _profile_directions(info)
    else:
        directions = np.eye(hat_vec.size)
    intervals: dict[str, tuple[float, float]] = {}
    for j, name in enumerate(THETA_NAMES):
        half = max(half_width_frac * abs(hat[j]), half_width_floor)
        grid = np.linspace(hat[j] - half, hat[j] + half, n_grid)
        center = n_grid // 2
        lr = np.full(n_grid, np.inf)
        for i, g in enumerate(grid):
            if name == "logit_scale" and g <= 0:
                continue
            gv = math.log(g) if name == "logit_scale" else g
            vec = hat_vec + (gv - hat_vec[j]) * directions[:, j]
            vec[j] = gv
            theta = _vector_to_theta(vec, theta_hat.discount)
            ll = dynamic_log_likelihood(
                theta, observations, profit_table,
                warm_start=warm, caches=caches, **solver_options
            )
            lr[i] = 2.0 * (ll_hat - ll)
        accepted = lr <= crit
        if not accepted[center]:
            intervals[name] = (hat[j], hat[j])
            continue
        lo_i, hi_i = center, center
        while lo_i > 0 and accepted[lo_i - 1]:
            lo_i -= 1
        while hi_i < n_grid - 1 and accepted[hi_i + 1]:
            hi_i += 1
        # Interpolate each endpoint to the LR crossing in sqrt(LR), which is
        # exact when the log-likelihood is locally quadratic.
        root = np.sqrt(np.clip(lr, 0.0, None))
        root_crit = math.sqrt(crit)
        lo = float(grid[lo_i])
        if lo_i > 0 and np.isfinite(lr[lo_i - 1]):
            frac = (root[lo_i - 1] - root_crit) / (root[lo_i - 1] - root[lo_i])
            lo = float(grid[lo_i - 1] + frac * (grid[lo_i] - grid[lo_i - 1]))
        hi = float(grid[hi_i])
        if hi_i < n_grid - 1 and np.isfinite(lr[hi_i + 1]):
            frac = (root[hi_i + 1] - root_crit) / (root[hi_i + 1] - root[hi_i])
            hi = float(grid[hi_i + 1] - frac * (grid[hi_i + 1] - grid[hi_i]))
        intervals[name] = (lo, hi)
    return intervals
