"""Command line entry point (``meandcvar``)."""

from __future__ import annotations

import logging
from pathlib import Path

import click

from .config import ConfigError, ExperimentConfig, load_config, parse_config, with_overrides
from .experiments import build_insurance_model, replace_section, run_experiment
from .insurance.engine import normalize_exposures, simulate_cube, write_cube_csv
from .market import simulate_returns, write_returns_csv
from .reporting import FINANCE_COLUMNS, INSURANCE_COLUMNS, emit_report, format_table


def _load(config, kind: str | None, seed, paths, out) -> ExperimentConfig:
    try:
        cfg = load_config(config) if config else parse_config({"kind": kind or "finance"})
        cfg = with_overrides(cfg, seed=seed, paths=paths, out=out)
    except (ConfigError, OSError) as err:
        raise click.ClickException(str(err)) from None
    if kind is not None and cfg.kind != kind:
        raise click.ClickException(f"config kind is {cfg.kind!r}, this command needs {kind!r}")
    return cfg


def _common(fn):
    fn = click.option("--out", type=click.Path(file_okay=False), default=None,
                      help="Output directory (overrides output_dir).")(fn)
    fn = click.option("--paths", type=click.IntRange(min=1), default=None,
                      help="Scenario count for every sample set.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Master seed for scenario, init and eval streams.")(fn)
    fn = click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None,
                      help="YAML experiment config.")(fn)
    return fn


def _run(cfg: ExperimentConfig):
    try:
        res = run_experiment(cfg)
    except (ValueError, RuntimeError) as err:
        raise click.ClickException(str(err)) from None
    cols = FINANCE_COLUMNS if cfg.kind == "finance" else INSURANCE_COLUMNS
    click.echo(format_table(cols, res.rows))
    click.echo(f"wrote {res.out_dir}")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool):
    """Mean-DCVaR portfolio and insurance underwriting experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command("simulate-market")
@_common
def simulate_market_cmd(config, seed, paths, out):
    """Write simulated gross returns, one CSV per rebalancing grid."""
    cfg = _load(config, "finance", seed, paths, out)
    fin, dest = cfg.finance, Path(cfg.output_dir)
    dest.mkdir(parents=True, exist_ok=True)
    for N in fin.n_steps:
        batch = simulate_returns(fin.market.params(N), fin.saa_paths, cfg.seeds.scenario)
        write_returns_csv(batch, dest / f"returns_N{N}.csv")
        click.echo(f"wrote {dest / f'returns_N{N}.csv'}")


@main.command("baseline")
@_common
def baseline_cmd(config, seed, paths, out):
    """Fit the static SAA baselines only."""
    cfg = _load(config, "finance", seed, paths, out)
    _run(replace_section(cfg, train_nn=False))


@main.command("train")
@_common
def train_cmd(config, seed, paths, out):
    """Train the neural policy only."""
    cfg = _load(config, "finance", seed, paths, out)
    _run(replace_section(cfg, train_nn=True, baselines=()))


@main.command("evaluate")
@_common
def evaluate_cmd(config, seed, paths, out):
    """Run the experiment exactly as configured (finance or insurance)."""
    if config is None:
        raise click.ClickException("evaluate needs --config")
    _run(_load(config, None, seed, paths, out))


@main.command("insurance-simulate")
@_common
def insurance_simulate_cmd(config, seed, paths, out):
    """Write a per-scenario annual profit cube for the calibrated model."""
    cfg = _load(config, "insurance", seed, paths, out)
    ins, dest = cfg.insurance, Path(cfg.output_dir)
    dest.mkdir(parents=True, exist_ok=True)
    model, _ = normalize_exposures(build_insurance_model(ins), ins.pricing_paths,
                                   cfg.seeds.scenario)
    cube = simulate_cube(model, ins.train_paths, cfg.seeds.scenario, ins.n_inforce, ins.n_ctrl)
    write_cube_csv(cube, dest / "profits.csv")
    click.echo(f"wrote {dest / 'profits.csv'}")


@main.command("insurance-train")
@_common
def insurance_train_cmd(config, seed, paths, out):
    """Fit the insurance baselines and train the underwriting policy."""
    _run(_load(config, "insurance", seed, paths, out))


@main.command("report")
@click.argument("results", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None,
              help="Also write the table to this file.")
def report_cmd(results, out):
    """Print a results CSV as an aligned table."""
    try:
        click.echo(emit_report(results, out))
    except ValueError as err:
        raise click.ClickException(str(err)) from None


if __name__ == "__main__":
    main()
