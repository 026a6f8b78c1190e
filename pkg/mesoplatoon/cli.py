"""Command-line interface: simulate, analyze, sweep, runs.

Exit status is 0 on success, 1 when the toolkit rejects the input or the run
(invalid config, schema mismatch, divergence, unwritable output) and 2 for usage errors.
"""

import functools
import logging
import sys
from pathlib import Path
from typing import Dict, Optional, Tuple

import click

from . import __version__
from .config import LOG_LEVEL, OUTPUT_DIR
from .database import Database, RunRecord
from .errors import PlatoonError
from .runconfig import LOG_LEVELS, RunConfig, apply_overrides, build_run_config, read_config_file
from .simulate import simulate
from .stability import build_report, lyapunov_constants, report_summary
from .storage import (
    MANIFEST_FILE,
    SWEEP_TABLE_FILE,
    TRAJECTORY_FILE,
    manifest_items,
    read_trajectory_csv,
    write_manifest,
    write_report,
    write_sweep_table,
    write_trajectory_csv,
)
from .sweep import run_sweep

logger = logging.getLogger(__name__)

SCALING_TABLE_FILE = "scaling.csv"

config_option = click.option(
    "--config", "config_path", required=True,
    type=click.Path(exists=True, dir_okay=False, readable=True, path_type=Path),
    help="Run configuration file.",
)
output_option = click.option(
    "--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None,
    help="Directory for the run's artifacts.",
)
seed_option = click.option("--seed", type=int, default=None, help="Override ic.seed.")
dt_option = click.option("--dt", type=float, default=None, help="Override scenario.dt.")
level_option = click.option(
    "--log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default=None,
    help="Logging verbosity (default: run.log_level, then LOG_LEVEL).",
)


def configure_logging(level: Optional[str]) -> None:
    logging.basicConfig(
        level=(level or LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def handle_errors(command):
    """Turn toolkit and file-system errors into a one-line diagnostic and exit status 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (PlatoonError, OSError) as e:
            logger.error(f"{command.__name__} failed: {e}")
            click.echo(f"error: {e}", err=True)
            sys.exit(1)

    return wrapper


def load_run_config(path: Path, seed: Optional[int], dt: Optional[float],
                    log_level: Optional[str]) -> Tuple[RunConfig, str]:
    """Config with command-line overrides applied, plus the file's SHA-256."""
    flat, digest = read_config_file(path)
    overrides: Dict[str, str] = {}
    if seed is not None:
        overrides["ic.seed"] = str(seed)
    if dt is not None:
        overrides["scenario.dt"] = repr(dt)
    if log_level is not None:
        overrides["run.log_level"] = log_level.upper()
    apply_overrides(flat, overrides)
    config = build_run_config(flat, name=path.stem)
    configure_logging(config.log_level)
    logger.info(f"Loaded {path} (sha256 {digest[:12]}), seed {config.seed}, dt {config.dt}")
    return config, digest


def resolve_output_dir(option: Optional[Path], config: RunConfig) -> Path:
    if option is not None:
        return option
    if config.output_dir:
        return Path(config.output_dir)
    return OUTPUT_DIR / config.name


def open_registry(output_dir: Path) -> Optional[Database]:
    try:
        return Database(output_dir)
    except Exception as e:
        logger.warning(f"Run registry unavailable: {e}")
        return None


def record(registry: Optional[Database], command: str, config: RunConfig, digest: str,
           output_dir: Path, verdict: Optional[str] = None) -> Optional[int]:
    if registry is None:
        return None
    constants = lyapunov_constants(config.scenario.controller)
    run_id = registry.record_run(RunRecord(
        command=command,
        config_name=config.name,
        config_sha256=digest,
        policy=config.scenario.controller.policy.value,
        seed=config.seed,
        dt=config.dt,
        n_vehicles=config.scenario.n_vehicles,
        gamma_tilde=constants.gamma_tilde,
        verdict=verdict or ("PASS" if constants.certificate_valid else "FAIL"),
        output_dir=str(output_dir),
    ))
    registry.close()
    return run_id


@click.group()
@click.version_option(__version__, prog_name="mesoplatoon")
def cli():
    """Mesoscopic platoon control: simulation and stability analysis."""


@cli.command("simulate")
@config_option
@output_option
@seed_option
@dt_option
@level_option
@handle_errors
def simulate_command(config_path: Path, output_dir: Optional[Path], seed: Optional[int],
                     dt: Optional[float], log_level: Optional[str]):
    """Run a scenario and write its trajectory CSV and manifest."""
    config, digest = load_run_config(config_path, seed, dt, log_level)
    log = simulate(config.scenario)

    directory = resolve_output_dir(output_dir, config)
    csv_path = write_trajectory_csv(log, directory / TRAJECTORY_FILE)
    run_id = record(open_registry(directory), "simulate", config, digest, directory)
    write_manifest(directory, manifest_items(config, str(config_path), digest, run_id))
    click.echo(f"trajectory: {csv_path}")
    click.echo(f"manifest: {directory / MANIFEST_FILE}")


@cli.command("analyze")
@click.argument("log_path", type=click.Path(exists=True, dir_okay=False, readable=True, path_type=Path))
@config_option
@output_option
@seed_option
@dt_option
@level_option
@handle_errors
def analyze_command(log_path: Path, config_path: Path, output_dir: Optional[Path], seed: Optional[int],
                    dt: Optional[float], log_level: Optional[str]):
    """Stability report for a trajectory CSV produced by `simulate`."""
    config, digest = load_run_config(config_path, seed, dt, log_level)
    log = read_trajectory_csv(log_path, config.scenario)
    run_info = {
        "config": config.name,
        "config_path": str(config_path),
        "config_sha256": digest,
        "seed": str(config.seed),
        "dt": repr(config.dt),
        "log": str(log_path),
    }
    report = build_report(log, run_info, window=config.analysis_window, iss=config.analysis_iss)
    summary = report_summary(report)

    directory = output_dir or log_path.parent
    text_path, summary_path = write_report(directory, report)
    record(open_registry(directory), "analyze", config, digest, directory, verdict=summary["certificate.verdict"])
    for key in ("constants.gamma_tilde", "certificate.verdict", "constants.exact_gamma_tilde",
                "certificate.exact_verdict", "metrics.within_bound"):
        click.echo(f"{key} = {summary[key]}")
    click.echo(f"report: {text_path}")
    click.echo(f"summary: {summary_path}")


@cli.command("sweep")
@config_option
@output_option
@seed_option
@dt_option
@level_option
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Override sweep.workers.")
@handle_errors
def sweep_command(config_path: Path, output_dir: Optional[Path], seed: Optional[int], dt: Optional[float],
                  log_level: Optional[str], workers: Optional[int]):
    """Evaluate a parameter grid and write the sweep table."""
    config, digest = load_run_config(config_path, seed, dt, log_level)
    directory = resolve_output_dir(output_dir, config)
    result = run_sweep(config, output_dir=directory, workers=workers)

    failing = sum(1 for row in result.rows if row.get("verdict") != "PASS")
    table = write_sweep_table(result.rows, directory / SWEEP_TABLE_FILE)
    click.echo(f"sweep: {table} ({len(result.rows)} points, {failing} not passing)")
    if result.scaling:
        scaling = write_sweep_table(result.scaling_rows(), directory / SCALING_TABLE_FILE)
        for group, verdict in result.scaling:
            label = ", ".join(f"{k}={v}" for k, v in group) or "all points"
            click.echo(f"scaling ({label}): spread {verdict.spread:.4f} -> {'PASS' if verdict.passed else 'FAIL'}")
        click.echo(f"scaling table: {scaling}")
    run_id = record(open_registry(directory), "sweep", config, digest, directory,
                    verdict=f"{len(result.rows) - failing}/{len(result.rows)} PASS")
    write_manifest(directory, manifest_items(config, str(config_path), digest, run_id))


@cli.command("runs")
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Directory holding the registry (default: OUTPUT_DIR).")
@click.option("--limit", type=click.IntRange(min=1), default=20, show_default=True)
def runs_command(output_dir: Optional[Path], limit: int):
    """List recorded runs, most recent first."""
    configure_logging(None)
    registry = open_registry(output_dir or OUTPUT_DIR)
    if registry is None:
        sys.exit(1)
    for run in registry.list_runs(limit):
        click.echo(
            f"{run.id:5d}  {run.created:%Y-%m-%d %H:%M:%S}  {run.command:8s}  {run.config_name:16s}  "
            f"seed={run.seed} dt={run.dt} N+1={run.n_vehicles} gamma={run.gamma_tilde}  {run.verdict}"
        )
    registry.close()


def main():
    cli()
