"""Command-line runner.

Exit codes: 0 on success, 2 on configuration errors, 3 on runtime aborts.
The FEDCAUSAL_SEED environment variable overrides the config seed.
"""

from __future__ import annotations

import logging
import os
import sys

import click

from .errors import ConfigError, FedCausalError
from .experiments import (
    PAPER_SCALE_REPLICATIONS,
    builtin_panel_configs,
    emit_plotdata,
    load_scenario_config,
    run_matrix,
    run_scenario,
)

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _seed_override(seed: int | None) -> int | None:
    env = os.environ.get("FEDCAUSAL_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"FEDCAUSAL_SEED={env!r} is not an integer") from None
    return seed


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-replication details.")
def main(verbose: bool):
    """Federated ATE estimation: Monte Carlo scenarios and panel runs."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--paper-scale", is_flag=True,
              help=f"Raise replications to {PAPER_SCALE_REPLICATIONS}.")
@click.option("--out", "out_dir", default=None, type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--jobs", default=1, type=int)
@click.option("--plots/--no-plots", default=True, help="Emit plot data files.")
def run(config_path, paper_scale, out_dir, seed, jobs, plots):
    """Run one scenario from a config file."""
    try:
        overrides: dict = {}
        seed = _seed_override(seed)
        if seed is not None:
            overrides["seed"] = seed
        if out_dir is not None:
            overrides["out_dir"] = out_dir
        if paper_scale:
            overrides["replications"] = PAPER_SCALE_REPLICATIONS
        cfg = load_scenario_config(config_path, overrides)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        summary = run_scenario(cfg, jobs=jobs)
        if plots:
            emit_plotdata(summary)
    except FedCausalError as exc:
        click.echo(f"run aborted: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)
    _echo_summary(summary)


@main.command()
@click.option("--all", "run_all", is_flag=True, help="Run all six benchmark panels.")
@click.option("--dgp", type=click.Choice(["A", "B"]), default=None)
@click.option("--regime", type=click.Choice(["none", "poor", "good"]), default=None)
@click.option("--paper-scale", is_flag=True)
@click.option("--replications", default=300, type=int)
@click.option("--out", "out_dir", default="out", type=click.Path())
@click.option("--seed", default=None, type=int)
@click.option("--jobs", default=1, type=int)
def panels(run_all, dgp, regime, paper_scale, replications, out_dir, seed, jobs):
    """Run the benchmark panel matrix (both designs, three overlap regimes)."""
    try:
        seed = _seed_override(seed)
        configs = builtin_panel_configs(
            replications=replications,
            out_dir=out_dir,
            seed=seed if seed is not None else 20250801,
            paper_scale=paper_scale,
        )
        if not run_all:
            configs = [
                c
                for c in configs
                if (dgp is None or c.dgp == dgp)
                and (regime is None or c.overlap_regime == regime)
            ]
            if not configs:
                raise ConfigError("no panels selected; use --all or --dgp/--regime")
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        summaries = run_matrix(configs, jobs=jobs)
        for summary in summaries:
            emit_plotdata(summary)
            _echo_summary(summary)
    except FedCausalError as exc:
        click.echo(f"run aborted: {exc}", err=True)
        sys.exit(EXIT_RUNTIME)


def _echo_summary(summary) -> None:
    click.echo(
        f"[{summary.name}] design {summary.dgp}, regime {summary.overlap_regime}, "
        f"true ATE {summary.true_ate:.4f} (se {summary.true_ate_se:.4f})"
    )
    for name, stats in summary.estimator_stats.items():
        if stats["n_ok"]:
            click.echo(
                f"  {name:<24} mean {stats['mean_tau']:9.4f}  "
                f"bias {stats['bias']:+8.4f}  mc var {stats['mc_variance']:.5f}  "
                f"ok {stats['n_ok']}"
            )
        else:
            click.echo(
                f"  {name:<24} undefined in {stats['n_meta_undefined']} "
                f"replication(s), errors {stats['n_error']}"
            )
    click.echo(f"  raw: {summary.raw_csv}")


if __name__ == "__main__":
    main()
