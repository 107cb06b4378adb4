"""Command-line surface orchestrating the pipeline.

Every subcommand reads a TOML config, applies flag overrides, writes CSV
outputs plus a run manifest (config hash, seed, versions) into the output
directory. Exit codes: 0 success, 1 validation/usage error, 2 solver or
estimation failure.
"""
from __future__ import annotations

import csv
import sys
from pathlib import Path

import click
import numpy as np

from . import fixtures, io
from .dynamics import backward_induction
from .errors import CartelsimError, EstimationError, SolverError
from .estimation import (
    estimate_dynamic,
    lr_confidence_intervals,
    THETA_NAMES,
    tsls_panel,
)
from .simulation import (
    MarketEnvironment,
    Scenario,
    ScenarioKind,
    ensemble_max_price,
    run_scenario,
    welfare_by_regime,
    welfare_deltas,
)
from .states import N_LEVELS, StateSpace

SCENARIO_CHOICES = [k.value for k in ScenarioKind]


def _environment(cfg: io.RunConfig) -> MarketEnvironment:
    space = StateSpace(caps=cfg.caps, n_pe=cfg.n_potential_entrants)
    return MarketEnvironment(
        space, cfg.static_params, cfg.demand_states(), cfg.regimes(),
        cfg.market, base_year=cfg.base_year,
    )


def _solver_options(cfg: io.RunConfig) -> dict:
    return {
        "tol": cfg.ccp_tol,
        "max_sweeps": cfg.max_sweeps,
        "level4_build": cfg.level4_build,
    }


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _finish(cfg: io.RunConfig, config_path: str, seed: int) -> None:
    io.write_manifest(cfg.out_dir, config_path, seed)


@click.group()
def cli() -> None:
    """Cartelized-industry structural pipeline."""


CONFIG_OPT = click.option("--config", "config_path", required=True,
                          type=click.Path(), help="TOML run configuration.")
MARKET_OPT = click.option("--market", default=None, help="Market override.")
SEED_OPT = click.option("--seed", default=None, type=int, help="Base seed override.")
NSIMS_OPT = click.option("--n-sims", default=None, type=int,
                         help="Ensemble size override.")
OUTDIR_OPT = click.option("--out-dir", default=None, type=click.Path(),
                          help="Output directory override.")


def _load(config_path, market=None, seed=None, n_sims=None, out_dir=None) -> io.RunConfig:
    cfg = io.load_config(config_path)
    if market is not None:
        if market != cfg.market:
            cfg.market = market
            cfg.static_params = fixtures.STATIC_FIXTURES[market] \
                if market in fixtures.STATIC_FIXTURES else cfg.static_params
            cfg.dynamic_params = fixtures.DYNAMIC_FIXTURES[market] \
                if market in fixtures.DYNAMIC_FIXTURES else cfg.dynamic_params
    if seed is not None:
        cfg.base_seed = seed
    if n_sims is not None:
        cfg.n_sims = n_sims
    if out_dir is not None:
        cfg.out_dir = Path(out_dir)
    return cfg


@cli.command("solve")
@CONFIG_OPT
@MARKET_OPT
@OUTDIR_OPT
def solve_cmd(config_path, market, out_dir) -> None:
    """Solve the dynamic game and write the policy table."""
    cfg = _load(config_path, market=market, out_dir=out_dir)
    env = _environment(cfg)
    policy = backward_induction(
        env.profit_table(), cfg.dynamic_params, **_solver_options(cfg)
    )
    rows = []
    for t in range(policy.horizon - 1):
        for si, state in enumerate(env.space.states):
            for l in range(N_LEVELS):
                for a, action in enumerate(("x", "k", "b")):
                    rows.append([
                        t, *state, f"level{l + 1}", action,
                        repr(float(policy.ccp_inc[t, l, si, a])),
                        repr(float(policy.value_inc[t, l, si])),
                    ])
            for a, action in enumerate(("x", "e")):
                rows.append([
                    t, *state, "entrant", action,
                    repr(float(policy.ccp_pe[t, si, a])),
                    repr(float(policy.value_pe[t, si])),
                ])
    _write_csv(
        cfg.out_dir / "policy.csv",
        ["period", "n1", "n2", "n3", "n4", "actor", "action", "ccp", "value"],
        rows,
    )
    _finish(cfg, config_path, cfg.base_seed)
    click.echo(f"wrote {cfg.out_dir / 'policy.csv'}")


@cli.command("estimate-static")
@CONFIG_OPT
@OUTDIR_OPT
def estimate_static_cmd(config_path, out_dir) -> None:
    """Demand and supply regressions from the route-year panel."""
    cfg = _load(config_path, out_dir=out_dir)
    if cfg.route_csv is None:
        raise click.UsageError("config must set paths.route_csv for estimate-static")
    records = io.load_route_year_csv(cfg.route_csv)
    routes = np.array([r.route for r in records])
    pre80 = np.array([1.0 if r.year <= 1979 else 0.0 for r in records])
    y8083 = np.array([1.0 if 1980 <= r.year <= 1983 else 0.0 for r in records])
    shifters = np.column_stack([
        [r.avg_ship_age for r in records],
        [r.share_old_ships for r in records],
        [r.avg_ship_size for r in records],
    ])
    log_q = np.log([r.quantity for r in records])
    log_p = np.log([r.price for r in records])
    log_gdp = np.array([r.log_gdp for r in records])
    demand = tsls_panel(
        log_q, log_p, np.column_stack([log_gdp, pre80, y8083]), shifters,
        ["log_price", "log_gdp", "pre1980", "y1980_83"],
        fixed_effect_group=routes, cluster_group=routes,
    )
    price = np.array([r.price for r in records])
    utilization = np.array([r.quantity / r.total_tonnage for r in records])
    supply = tsls_panel(
        price, utilization, np.column_stack([pre80, y8083, shifters]),
        log_gdp[:, None],
        ["utilization", "pre1980", "y1980_83",
         "avg_ship_age", "share_old_ships", "avg_ship_size"],
        fixed_effect_group=routes, cluster_group=routes,
    )
    rows = []
    for label, rep in (("demand", demand), ("supply", supply)):
        for name, c, s in zip(rep.names, rep.coef, rep.se):
            rows.append([label, name, repr(float(c)), repr(float(s))])
        for route, feff in sorted(rep.fixed_effects.items()):
            rows.append([label, f"fe_{route}", repr(float(feff)), ""])
        rows.append([label, "first_stage_f", repr(float(rep.first_stage_f)), ""])
    _write_csv(cfg.out_dir / "static_estimates.csv",
               ["equation", "name", "coefficient", "cluster_se"], rows)
    _finish(cfg, config_path, cfg.base_seed)
    click.echo(f"wrote {cfg.out_dir / 'static_estimates.csv'}")


def _dynamic_inputs(cfg: io.RunConfig):
    if cfg.firm_csv is None:
        raise click.UsageError("config must set paths.firm_csv")
    firm_records = io.load_firm_csv(cfg.firm_csv)
    observations = io.tallies_from_firm_records(
        firm_records, cfg.n_potential_entrants, cfg.base_year
    )
    env = _environment(cfg)
    return observations, env.profit_table()


@cli.command("estimate-dynamic")
@CONFIG_OPT
@OUTDIR_OPT
def estimate_dynamic_cmd(config_path, out_dir) -> None:
    """Nested-fixed-point MLE of the dynamic cost parameters."""
    cfg = _load(config_path, out_dir=out_dir)
    observations, table = _dynamic_inputs(cfg)
    result = estimate_dynamic(
        observations, table, cfg.dynamic_params,
        max_evaluations=cfg.max_evaluations, **_solver_options(cfg),
    )
    theta = result.theta
    rows = [[name, repr(getattr(theta, name))] for name in THETA_NAMES]
    rows.append(["log_likelihood", repr(result.log_likelihood)])
    rows.append(["n_evaluations", str(result.n_evaluations)])
    rows.append(["converged", str(result.converged).lower()])
    _write_csv(cfg.out_dir / "dynamic_estimates.csv", ["name", "value"], rows)
    _write_csv(
        cfg.out_dir / "likelihood_trace.csv", ["evaluation", "log_likelihood"],
        [[i, repr(ll)] for i, ll in result.trace],
    )
    _finish(cfg, config_path, cfg.base_seed)
    click.echo(f"wrote {cfg.out_dir / 'dynamic_estimates.csv'}")


@cli.command("ci")
@CONFIG_OPT
@OUTDIR_OPT
def ci_cmd(config_path, out_dir) -> None:
    """Likelihood-ratio confidence intervals around the MLE."""
    cfg = _load(config_path, out_dir=out_dir)
    observations, table = _dynamic_inputs(cfg)
    result = estimate_dynamic(
        observations, table, cfg.dynamic_params,
        max_evaluations=cfg.max_evaluations, **_solver_options(cfg),
    )
    intervals = lr_confidence_intervals(
        result.theta, result.log_likelihood, observations, table,
        **_solver_options(cfg),
    )
    rows = [
        [name, repr(getattr(result.theta, name)), repr(lo), repr(hi)]
        for name, (lo, hi) in intervals.items()
    ]
    _write_csv(cfg.out_dir / "confidence_intervals.csv",
               ["name", "estimate", "lo_90", "hi_90"], rows)
    _finish(cfg, config_path, cfg.base_seed)
    click.echo(f"wrote {cfg.out_dir / 'confidence_intervals.csv'}")


def _run_one_scenario(cfg: io.RunConfig, kind: ScenarioKind):
    env = _environment(cfg)
    return run_scenario(
        Scenario(kind=kind), env, cfg.dynamic_params, cfg.initial_state,
        n_sims=cfg.n_sims, base_seed=cfg.base_seed, **_solver_options(cfg),
    )


def _write_mean_path(cfg: io.RunConfig, name: str, ensemble) -> None:
    rows = [
        [cfg.base_year + t] + [repr(float(c)) for c in ensemble.mean_counts[t]]
        for t in range(ensemble.mean_counts.shape[0])
    ]
    _write_csv(cfg.out_dir / f"{name}_mean_path.csv",
               ["year", "n1", "n2", "n3", "n4"], rows)
    # Plain x-y plot data: year vs total firm count.
    plot = cfg.out_dir / f"{name}_mean_path.dat"
    plot.write_text("".join(
        f"{cfg.base_year + t} {ensemble.mean_counts[t].sum():.6f}\n"
        for t in range(ensemble.mean_counts.shape[0])
    ))


@cli.command("simulate")
@CONFIG_OPT
@MARKET_OPT
@SEED_OPT
@NSIMS_OPT
@OUTDIR_OPT
def simulate_cmd(config_path, market, seed, n_sims, out_dir) -> None:
    """Simulate the baseline ensemble and write mean paths."""
    cfg = _load(config_path, market, seed, n_sims, out_dir)
    result = _run_one_scenario(cfg, ScenarioKind.BASELINE)
    _write_mean_path(cfg, "baseline", result.ensemble)
    _finish(cfg, config_path, cfg.base_seed)
    click.echo(f"wrote {cfg.out_dir / 'baseline_mean_path.csv'}")


def _welfare_pair(cfg: io.RunConfig, kind: ScenarioKind):
    base = _run_one_scenario(cfg, ScenarioKind.BASELINE)
    choke = cfg.choke_price or 10.0 * ensemble_max_price(base.ensemble)
    beta = cfg.dynamic_params.discount
    base_w = welfare_by_regime(
        base.ensemble, base.env, choke, beta, cfg.regime_windows,
        net_dynamic_costs=cfg.net_dynamic_costs, dynamic_params=cfg.dynamic_params,
    )
    if kind is ScenarioKind.BASELINE:
        return base, base_w, None, None
    cf = _run_one_scenario(cfg, kind)
    cf_w = welfare_by_regime(
        cf.ensemble, cf.env, choke, beta, cfg.regime_windows,
        net_dynamic_costs=cfg.net_dynamic_costs, dynamic_params=cfg.dynamic_params,
    )
    return base, base_w, cf, cf_w


def _welfare_rows(report):
    return [
        [f"{a}-{b}", repr(float(cs)), repr(float(ps)), repr(float(sw))]
        for (a, b), cs, ps, sw in zip(
            report.windows, report.consumer_surplus,
            report.producer_surplus, report.social_welfare,
        )
    ]


@cli.command("welfare")
@CONFIG_OPT
@MARKET_OPT
@SEED_OPT
@NSIMS_OPT
@OUTDIR_OPT
def welfare_cmd(config_path, market, seed, n_sims, out_dir) -> None:
    """Baseline welfare by regime window (billion USD, discounted)."""
    cfg = _load(config_path, market, seed, n_sims, out_dir)
    _, base_w, _, _ = _welfare_pair(cfg, ScenarioKind.BASELINE)
    _write_csv(cfg.out_dir / "welfare_baseline.csv",
               ["window", "cs_bn_usd", "ps_bn_usd", "sw_bn_usd"],
               _welfare_rows(base_w))
    _finish(cfg, config_path, cfg.base_seed)
    click.echo(f"wrote {cfg.out_dir / 'welfare_baseline.csv'}")


@cli.command("counterfactual")
@CONFIG_OPT
@MARKET_OPT
@click.option("--scenario", required=True, type=click.Choice(SCENARIO_CHOICES))
@SEED_OPT
@NSIMS_OPT
@OUTDIR_OPT
def counterfactual_cmd(config_path, market, scenario, seed, n_sims, out_dir) -> None:
    """Run a counterfactual and write welfare deltas vs baseline."""
    cfg = _load(config_path, market, seed, n_sims, out_dir)
    kind = ScenarioKind(scenario)
    if kind is ScenarioKind.BASELINE:
        raise click.UsageError("pick a non-baseline scenario for counterfactual")
    base, base_w, cf, cf_w = _welfare_pair(cfg, kind)
    deltas = welfare_deltas(base_w, cf_w)
    rows = []
    for i, (a, b) in enumerate(cfg.regime_windows):
        rows.append([
            f"{a}-{b}",
            repr(float(deltas["consumer_surplus"][i])),
            repr(float(deltas["producer_surplus"][i])),
            repr(float(deltas["social_welfare"][i])),
        ])
    _write_csv(cfg.out_dir / f"welfare_delta_{scenario}.csv",
               ["window", "d_cs", "d_ps", "d_sw"], rows)
    _write_mean_path(cfg, scenario, cf.ensemble)
    _finish(cfg, config_path, cfg.base_seed)
    click.echo(f"wrote {cfg.out_dir / f'welfare_delta_{scenario}.csv'}")


@cli.command("synth")
@CONFIG_OPT
@MARKET_OPT
@SEED_OPT
@OUTDIR_OPT
def synth_cmd(config_path, market, seed, out_dir) -> None:
    """Generate a synthetic panel at the configured true parameters."""
    cfg = _load(config_path, market=market, seed=seed, out_dir=out_dir)
    spec = io.SyntheticSpec(
        static_params=cfg.static_params,
        dynamic_params=cfg.dynamic_params,
        market=cfg.market,
        demand_states=cfg.demand_states(),
        regimes=cfg.regimes(),
        n_markets=cfg.n_synth_markets,
        caps=cfg.caps,
        n_potential_entrants=cfg.n_potential_entrants,
        initial_state=cfg.initial_state,
        base_year=cfg.base_year,
        seed=cfg.base_seed,
    )
    panel = io.generate_synthetic_panel(spec)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    io.save_route_year_csv(cfg.out_dir / "route_year.csv", panel.route_records)
    io.save_firm_csv(cfg.out_dir / "firm.csv", panel.firm_records)
    _finish(cfg, config_path, cfg.base_seed)
    click.echo(f"wrote {cfg.out_dir / 'route_year.csv'} and {cfg.out_dir / 'firm.csv'}")


def main(argv=None) -> int:
    """Entry point with the documented exit-code contract."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:       # --help and friends
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(exc.format_message(), err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return 1
    except (SolverError, EstimationError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except CartelsimError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
