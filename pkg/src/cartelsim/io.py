"""CSV schemas, run configuration, and synthetic panel generation.

Two input schemas are fixed: route-year records
(``market,route,year,price,quantity,total_tonnage,log_gdp,avg_ship_age,share_old_ships,avg_ship_size``)
and firm-market-year records (``firm_id,market,year,tonnage,action``).
Loaders validate every row and report failures with the row number; they
never silently drop data. The synthetic generator closes the loop: it
solves the model at true parameters, simulates panels, and emits CSVs in
exactly the load schemas.
"""
from __future__ import annotations

import csv
import hashlib
import json
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dynamics import DynamicParams, backward_induction
from .errors import ConfigError, ConsistencyError, LoadError
from .estimation import ObservedTransition
from .simulation import MarketEnvironment, simulate_path
from .statics import Regime, StaticParams
from .states import (
    ActionTally,
    DEFAULT_CUTOFFS,
    IndustryState,
    N_LEVELS,
    StateSpace,
    discretize_tonnage,
    representative_tonnage,
    roundtrip_tonnage,
)

ROUTE_YEAR_HEADER = (
    "market,route,year,price,quantity,total_tonnage,"
    "log_gdp,avg_ship_age,share_old_ships,avg_ship_size"
)
FIRM_HEADER = "firm_id,market,year,tonnage,action"

INCUMBENT_ACTIONS = {"x", "k", "b"}
VALID_ACTIONS = INCUMBENT_ACTIONS | {"e"}


@dataclass(frozen=True)
class RouteYearRecord:
    market: str
    route: str
    year: int
    price: float
    quantity: float
    total_tonnage: float
    log_gdp: float
    avg_ship_age: float
    share_old_ships: float
    avg_ship_size: float


@dataclass(frozen=True)
class FirmYearRecord:
    firm_id: str
    market: str
    year: int
    tonnage: float
    action: str


def _parse(row_num: int, raw: str, kind, column: str):
    try:
        return kind(raw)
    except ValueError:
        raise LoadError(
            f"row {row_num}: column {column!r} has non-{kind.__name__} value {raw!r}"
        ) from None


def load_route_year_csv(path: str | Path) -> list[RouteYearRecord]:
    path = Path(path)
    records: list[RouteYearRecord] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file, expected header {ROUTE_YEAR_HEADER!r}")
        if header != ROUTE_YEAR_HEADER.split(","):
            raise LoadError(
                f"{path}: bad header {','.join(header)!r}; expected {ROUTE_YEAR_HEADER!r}"
            )
        for i, row in enumerate(reader, start=1):
            if len(row) != 10:
                raise LoadError(f"row {i}: expected 10 columns, got {len(row)}")
            rec = RouteYearRecord(
                market=row[0], route=row[1],
                year=_parse(i, row[2], int, "year"),
                price=_parse(i, row[3], float, "price"),
                quantity=_parse(i, row[4], float, "quantity"),
                total_tonnage=_parse(i, row[5], float, "total_tonnage"),
                log_gdp=_parse(i, row[6], float, "log_gdp"),
                avg_ship_age=_parse(i, row[7], float, "avg_ship_age"),
                share_old_ships=_parse(i, row[8], float, "share_old_ships"),
                avg_ship_size=_parse(i, row[9], float, "avg_ship_size"),
            )
            if rec.price <= 0 or rec.quantity <= 0 or rec.total_tonnage <= 0:
                raise LoadError(
                    f"row {i}: price, quantity and total_tonnage must be positive"
                )
            records.append(rec)
    return records


def save_route_year_csv(path: str | Path, records: Sequence[RouteYearRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROUTE_YEAR_HEADER.split(","))
        for r in records:
            writer.writerow([
                r.market, r.route, r.year,
                repr(r.price), repr(r.quantity), repr(r.total_tonnage),
                repr(r.log_gdp), repr(r.avg_ship_age),
                repr(r.share_old_ships), repr(r.avg_ship_size),
            ])


def load_firm_csv(path: str | Path) -> list[FirmYearRecord]:
    path = Path(path)
    records: list[FirmYearRecord] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError(f"{path}: empty file, expected header {FIRM_HEADER!r}")
        if header != FIRM_HEADER.split(","):
            raise LoadError(
                f"{path}: bad header {','.join(header)!r}; expected {FIRM_HEADER!r}"
            )
        for i, row in enumerate(reader, start=1):
            if len(row) != 5:
                raise LoadError(f"row {i}: expected 5 columns, got {len(row)}")
            rec = FirmYearRecord(
                firm_id=row[0], market=row[1],
                year=_parse(i, row[2], int, "year"),
                tonnage=_parse(i, row[3], float, "tonnage"),
                action=row[4],
            )
            if rec.action not in VALID_ACTIONS:
                raise LoadError(
                    f"row {i}: invalid action {rec.action!r}; expected one of x,k,b,e"
                )
            # Entrants are recorded with tonnage 0; incumbents must have ships.
            if rec.action == "e" and rec.tonnage != 0:
                raise LoadError(f"row {i}: entrant rows must carry tonnage 0")
            if rec.action in INCUMBENT_ACTIONS and rec.tonnage <= 0:
                raise LoadError(f"row {i}: incumbent rows must carry positive tonnage")
            records.append(rec)
    return records


def save_firm_csv(path: str | Path, records: Sequence[FirmYearRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIRM_HEADER.split(","))
        for r in records:
            writer.writerow([r.firm_id, r.market, r.year, repr(r.tonnage), r.action])


def tallies_from_firm_records(
    records: Sequence[FirmYearRecord],
    n_potential_entrants: int,
    base_year: int,
    cutoffs: Sequence[float] = DEFAULT_CUTOFFS,
) -> list[ObservedTransition]:
    """Derive one observation per (market, year) from firm-level rows.

    The industry state counts incumbents (actions x/k/b) by their
    discretized tonnage level; exit/build tallies count their actions;
    entries count 'e' rows, and the remaining potential entrants quit.
    """
    by_my: dict[tuple[str, int], list[FirmYearRecord]] = {}
    for rec in records:
        by_my.setdefault((rec.market, rec.year), []).append(rec)
    observations = []
    for (market, year), rows in sorted(by_my.items()):
        counts, exits, builds = [0] * N_LEVELS, [0] * N_LEVELS, [0] * N_LEVELS
        entries = 0
        for rec in rows:
            if rec.action == "e":
                entries += 1
                continue
            level = discretize_tonnage(rec.tonnage, cutoffs)
            counts[level - 1] += 1
            if rec.action == "x":
                exits[level - 1] += 1
            elif rec.action == "b":
                builds[level - 1] += 1
        if entries > n_potential_entrants:
            raise ConsistencyError(
                f"{market} {year}: {entries} entries exceed the "
                f"{n_potential_entrants}-firm entrant pool"
            )
        observations.append(
            ObservedTransition(
                market=market,
                year_index=year - base_year,
                state=IndustryState(*counts),
                tally=ActionTally(
                    exits=tuple(exits), builds=tuple(builds),
                    entrant_quits=n_potential_entrants - entries,
                    entrant_entries=entries,
                ),
            )
        )
    return observations


# ---------------------------------------------------------------------------
# Synthetic panels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Everything needed to fabricate a panel from known parameters."""

    static_params: StaticParams
    dynamic_params: DynamicParams
    market: str
    demand_states: np.ndarray          # (T, n_routes), log scale
    regimes: tuple[Regime, ...]
    n_markets: int = 1
    caps: tuple[int, int, int, int] = (4, 3, 2, 1)
    n_potential_entrants: int = 4
    initial_state: IndustryState | tuple[IndustryState, ...] = IndustryState(2, 1, 1, 0)
    base_year: int = 1973
    seed: int = 0

    def __post_init__(self):
        self.static_params.validate()
        self.dynamic_params.validate()
        if self.n_markets < 1:
            raise ConfigError("need at least one synthetic market")

    def initial_state_for(self, m: int) -> IndustryState:
        """Initial state for market ``m``; a tuple of states is cycled so
        the panel starts from a spread of industry configurations."""
        init = self.initial_state
        if init and isinstance(init[0], tuple):
            return init[m % len(init)]
        return init  # type: ignore[return-value]


@dataclass
class SyntheticPanel:
    route_records: list[RouteYearRecord]
    firm_records: list[FirmYearRecord]
    observations: list[ObservedTransition]


class _FirmRegistry:
    """Tracks firm identities through a simulated path so the firm-level
    CSV is internally consistent (exits disappear, builds move up a level,
    entrants appear at level 1 the following year)."""

    def __init__(self, market: str, initial: IndustryState):
        self.market = market
        self.counter = 0
        self.firms: dict[str, int] = {}     # id -> level
        for level, n in enumerate(initial, start=1):
            for _ in range(n):
                self.firms[self._new_id()] = level

    def _new_id(self) -> str:
        self.counter += 1
        return f"{self.market}_f{self.counter:03d}"

    def assign_actions(self, tally: ActionTally) -> list[tuple[str, int, str]]:
        """Pick which firms realize the tallied actions (deterministic by id).

        Returns (firm_id, level, action) triples; level 0 marks entrants.
        """
        rows: list[tuple[str, int, str]] = []
        by_level: dict[int, list[str]] = {l: [] for l in range(1, N_LEVELS + 1)}
        for fid in sorted(self.firms):
            by_level[self.firms[fid]].append(fid)
        for l in range(1, N_LEVELS + 1):
            ids = by_level[l]
            ex, b = tally.exits[l - 1], tally.builds[l - 1]
            for fid in ids[:ex]:
                rows.append((fid, l, "x"))
                del self.firms[fid]
            for fid in ids[ex : ex + b]:
                rows.append((fid, l, "b"))
                self.firms[fid] = min(l + 1, N_LEVELS)
            for fid in ids[ex + b :]:
                rows.append((fid, l, "k"))
        for _ in range(tally.entrant_entries):
            fid = self._new_id()
            rows.append((fid, 0, "e"))
            self.firms[fid] = 1  # active from next year
        return rows

    def reconcile(self, next_state: IndustryState) -> None:
        """Trim overflow so registry counts match the realized (clamped)
        state; the newest firms at an over-cap level silently drop out."""
        by_level: dict[int, list[str]] = {l: [] for l in range(1, N_LEVELS + 1)}
        for fid in sorted(self.firms):
            by_level[self.firms[fid]].append(fid)
        for l in range(1, N_LEVELS + 1):
            excess = len(by_level[l]) - next_state[l - 1]
            if excess < 0:
                raise ConsistencyError(
                    f"registry lost firms at level {l}: have {len(by_level[l])}, "
                    f"state says {next_state[l - 1]}"
                )
            for fid in by_level[l][len(by_level[l]) - excess :]:
                del self.firms[fid]


def generate_synthetic_panel(spec: SyntheticSpec) -> SyntheticPanel:
    """Solve at the true parameters and simulate ``n_markets`` panels.

    Market m simulates with seed ``spec.seed + m``; the emitted firm rows
    cover the decision years (all but the final simulated year). Covariate
    columns are filled with deterministic placeholder series.
    """
    space = StateSpace(caps=spec.caps, n_pe=spec.n_potential_entrants)
    env = MarketEnvironment(
        space, spec.static_params, spec.demand_states, spec.regimes,
        spec.market, base_year=spec.base_year,
    )
    policy = backward_induction(env.profit_table(), spec.dynamic_params)
    rep = [representative_tonnage(l, spec.market) for l in range(1, N_LEVELS + 1)]
    # Emitted tonnages must discretize back to their level losslessly.
    emit = [roundtrip_tonnage(l, spec.market) for l in range(1, N_LEVELS + 1)]

    route_records: list[RouteYearRecord] = []
    firm_records: list[FirmYearRecord] = []
    for m in range(spec.n_markets):
        market = spec.market if spec.n_markets == 1 else f"{spec.market}_{m:02d}"
        init = spec.initial_state_for(m)
        path = simulate_path(policy, env, init, seed=spec.seed + m)
        registry = _FirmRegistry(market, init)
        for t, tally in enumerate(path.tallies):
            year = spec.base_year + t
            for fid, level, action in registry.assign_actions(tally):
                firm_records.append(FirmYearRecord(
                    firm_id=fid, market=market, year=year,
                    tonnage=0.0 if action == "e" else emit[level - 1],
                    action=action,
                ))
            registry.reconcile(path.states[t + 1])
        for t, state in enumerate(path.states):
            total = sum(rep[l] * n for l, n in enumerate(state))
            for r in range(path.prices.shape[1]):
                if not np.isfinite(path.prices[t, r]):
                    continue
                route_records.append(RouteYearRecord(
                    market=market, route=f"{market}_r{r}",
                    year=spec.base_year + t,
                    price=float(path.prices[t, r]),
                    quantity=float(path.quantities[t, r]),
                    total_tonnage=float(total),
                    log_gdp=float(spec.demand_states[t, r] / 2.0),
                    avg_ship_age=10.0 + 0.1 * t,
                    share_old_ships=0.2,
                    avg_ship_size=float(np.mean(rep)),
                ))
    observations = tallies_from_firm_records(
        firm_records, spec.n_potential_entrants, spec.base_year
    )
    return SyntheticPanel(route_records, firm_records, observations)


# ---------------------------------------------------------------------------
# Run configuration and manifest
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Parsed run configuration (TOML) with fixture-backed defaults."""

    static_params: StaticParams
    dynamic_params: DynamicParams
    market: str
    caps: tuple[int, int, int, int]
    n_potential_entrants: int
    ccp_tol: float
    max_sweeps: int
    level4_build: str
    n_sims: int
    base_seed: int
    horizon: int
    initial_state: IndustryState
    base_year: int
    choke_price: float | None
    net_dynamic_costs: bool
    regime_windows: tuple[tuple[int, int], ...]
    out_dir: Path
    route_csv: Path | None
    firm_csv: Path | None
    n_synth_markets: int
    max_evaluations: int
    raw: dict = field(repr=False, default_factory=dict)

    def demand_states(self) -> np.ndarray:
        from . import fixtures

        levels = self.raw.get("demand", {}).get("levels")
        if levels is not None:
            return np.tile(np.asarray(levels, dtype=float), (self.horizon, 1))
        return fixtures.demand_path(self.market, self.horizon)

    def regimes(self) -> tuple[Regime, ...]:
        from . import fixtures

        return fixtures.regime_path(self.horizon, self.base_year)


def load_config(path: str | Path) -> RunConfig:
    from . import fixtures

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    with path.open("rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from None

    market = raw.get("market", "transpacific")
    if market not in fixtures.MARKETS:
        raise ConfigError(f"unknown market {market!r}; expected one of {fixtures.MARKETS}")
    st = raw.get("static", {})
    base_static = fixtures.STATIC_FIXTURES[market]
    static_params = StaticParams(
        alpha1=st.get("alpha1", base_static.alpha1),
        gamma0=st.get("gamma0", base_static.gamma0),
        gamma1=st.get("gamma1", base_static.gamma1),
        cartel_effect_pre80=st.get("cartel_effect_pre80", base_static.cartel_effect_pre80),
        cartel_effect_80_83=st.get("cartel_effect_80_83", base_static.cartel_effect_80_83),
    )
    static_params.validate()
    dy = raw.get("dynamic", {})
    base_dyn = fixtures.DYNAMIC_FIXTURES[market]
    dynamic_params = DynamicParams(
        exit_cost=dy.get("exit_cost", base_dyn.exit_cost),
        operation_cost=dy.get("operation_cost", base_dyn.operation_cost),
        entry_cost=dy.get("entry_cost", base_dyn.entry_cost),
        invest_cost_low=dy.get("invest_cost_low", base_dyn.invest_cost_low),
        invest_cost_high=dy.get("invest_cost_high", base_dyn.invest_cost_high),
        logit_scale=dy.get("logit_scale", base_dyn.logit_scale),
        discount=dy.get("discount", 0.9),
    )
    dynamic_params.validate()
    solver = raw.get("solver", {})
    sim = raw.get("simulation", {})
    welfare = raw.get("welfare", {})
    paths = raw.get("paths", {})
    est = raw.get("estimation", {})
    caps = tuple(solver.get("caps", (4, 3, 2, 1)))
    if len(caps) != N_LEVELS:
        raise ConfigError(f"solver.caps must have {N_LEVELS} entries")
    horizon = int(sim.get("horizon", fixtures.DEFAULT_HORIZON))
    if horizon < 2:
        raise ConfigError("simulation.horizon must be at least 2")
    initial = tuple(sim.get("initial_state", (2, 1, 1, 0)))
    windows = tuple(
        tuple(w) for w in welfare.get("regime_windows",
                                      ((1973, 1979), (1980, 1983), (1984, 1990)))
    )
    for csv_key in ("route_csv", "firm_csv"):
        p = paths.get(csv_key)
        if p is not None and not Path(p).exists():
            raise ConfigError(f"paths.{csv_key} {p!r} does not exist")
    return RunConfig(
        static_params=static_params,
        dynamic_params=dynamic_params,
        market=market,
        caps=caps,
        n_potential_entrants=int(solver.get("n_potential_entrants", 4)),
        ccp_tol=float(solver.get("ccp_tol", 1e-6)),
        max_sweeps=int(solver.get("max_sweeps", 10_000)),
        level4_build=str(solver.get("level4_build", "zero")),
        n_sims=int(sim.get("n_sims", 1000)),
        base_seed=int(sim.get("base_seed", 0)),
        horizon=horizon,
        initial_state=IndustryState(*initial),
        base_year=int(sim.get("base_year", fixtures.DEFAULT_BASE_YEAR)),
        choke_price=welfare.get("choke_price"),
        net_dynamic_costs=bool(welfare.get("net_dynamic_costs", False)),
        regime_windows=windows,
        out_dir=Path(paths.get("out_dir", "out")),
        route_csv=Path(paths["route_csv"]) if "route_csv" in paths else None,
        firm_csv=Path(paths["firm_csv"]) if "firm_csv" in paths else None,
        n_synth_markets=int(raw.get("synth", {}).get("n_markets", 1)),
        max_evaluations=int(est.get("max_evaluations", 2000)),
        raw=raw,
    )


def write_manifest(
    out_dir: str | Path, config_path: str | Path, seed: int
) -> Path:
    """Record what produced a run: config hash, seed, library versions."""
    import numba
    import scipy

    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256(Path(config_path).read_bytes()).hexdigest()
    manifest = {
        "config_sha256": digest,
        "seed": seed,
        "versions": {
            "cartelsim": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
