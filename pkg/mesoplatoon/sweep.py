"""Parameter sweeps over the flat config keys.

`sweep.axis.<key> = v1, v2, ...` lines declare the grid; the cross product is
checked against the cap before any work starts.  Each grid point computes the
certificate constants and, when `sweep.simulate` is set, runs the scenario.
Points are independent and run in a process pool; a point that fails is
reported in its row instead of stopping the sweep.
"""

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, PlatoonError
from .models import ScalingVerdict, StringStabilityMetrics
from .runconfig import RunConfig, with_values
from .simulate import simulate
from .stability import build_report, lyapunov_constants, run_metrics, scaling_verdict
from .storage import TRAJECTORY_FILE, write_report, write_trajectory_csv

logger = logging.getLogger(__name__)

N_AXIS = "scenario.n_vehicles"


@dataclass(frozen=True)
class SweepPoint:
    index: int
    values: Tuple[Tuple[str, str], ...]
    config: RunConfig


@dataclass
class PointResult:
    row: Dict[str, object]
    metrics: Optional[StringStabilityMetrics] = None


@dataclass
class SweepResult:
    """Rows of the sweep table plus the length-independence verdicts."""
    rows: List[Dict[str, object]]
    scaling: List[Tuple[Tuple[Tuple[str, str], ...], ScalingVerdict]] = field(default_factory=list)

    def scaling_rows(self) -> List[Dict[str, object]]:
        rows = []
        for group, verdict in self.scaling:
            row: Dict[str, object] = dict(group)
            row.update({
                "n_vehicles": ",".join(str(m.n_vehicles) for m in verdict.metrics),
                "platoon_peaks": ",".join(f"{m.platoon_peak:.6g}" for m in verdict.metrics),
                "spread": verdict.spread,
                "all_within_bound": verdict.all_within_bound,
                "length_independent": verdict.length_independent,
                "verdict": "PASS" if verdict.passed else "FAIL",
            })
            rows.append(row)
        return rows


def grid_size(config: RunConfig) -> int:
    return int(np.prod([len(values) for _, values in config.sweep_axes])) if config.sweep_axes else 0


def expand_grid(config: RunConfig) -> List[SweepPoint]:
    """Cross product of the axes, in declaration order, one config per point."""
    if not config.sweep_axes:
        raise ConfigurationError("no sweep axes declared (use sweep.axis.<key> = v1, v2, ...)")
    size = grid_size(config)
    if size > config.sweep_cap:
        raise ConfigurationError(f"sweep has {size} points, more than the cap of {config.sweep_cap}")
    keys = [key for key, _ in config.sweep_axes]
    points = []
    for index, combo in enumerate(itertools.product(*(values for _, values in config.sweep_axes))):
        values = tuple(zip(keys, combo))
        try:
            point_config = with_values(config, dict(values))
        except ConfigurationError as e:
            raise ConfigurationError(f"sweep point {index} ({dict(values)}): {e}") from None
        points.append(SweepPoint(index=index, values=values, config=point_config))
    logger.info(f"Sweep grid: {len(points)} points over {', '.join(keys)}")
    return points


def _verdict(flag: bool) -> str:
    return "PASS" if flag else "FAIL"


def run_point(point: SweepPoint, simulate_point: bool, output_dir: Optional[str] = None) -> PointResult:
    """Constants (and optionally a simulation) for one grid point."""
    row: Dict[str, object] = {"point": point.index}
    row.update(dict(point.values))
    try:
        constants = lyapunov_constants(point.config.scenario.controller)
    except PlatoonError as e:
        row.update({"status": f"error: {e}", "verdict": "FAIL"})
        return PointResult(row=row)
    row.update({
        "gamma_tilde": constants.gamma_tilde,
        "exact_gamma_tilde": constants.exact_gamma_tilde,
        "certificate": _verdict(constants.certificate_valid),
    })
    if not simulate_point:
        row.update({"status": "ok", "verdict": row["certificate"]})
        return PointResult(row=row)

    try:
        log = simulate(point.config.scenario)
    except PlatoonError as e:
        logger.warning(f"Sweep point {point.index} failed: {e}")
        row.update({"status": f"error: {e}", "verdict": "FAIL"})
        return PointResult(row=row)
    metrics = run_metrics(log, constants)
    row.update({
        "platoon_peak": metrics.platoon_peak,
        "bound": metrics.bound,
        "within_bound": _verdict(metrics.within_bound),
        "terminal_max": float(np.max(metrics.terminal)),
        "min_gap": metrics.min_gap,
        "status": "ok",
        "verdict": _verdict(constants.certificate_valid and metrics.within_bound),
    })
    if output_dir is not None:
        directory = Path(output_dir) / f"point_{point.index:03d}"
        write_trajectory_csv(log, directory / TRAJECTORY_FILE)
        report = build_report(log, {"config": point.config.name, "seed": str(point.config.seed),
                                    "dt": repr(point.config.dt)},
                              window=point.config.analysis_window, iss=point.config.analysis_iss)
        write_report(directory, report)
    return PointResult(row=row, metrics=metrics)


def _run_task(task: Tuple[SweepPoint, bool, Optional[str]]) -> PointResult:
    return run_point(*task)


def scaling_groups(points: List[SweepPoint], results: List[PointResult],
                   tolerance: float = 0.10) -> List[Tuple[Tuple[Tuple[str, str], ...], ScalingVerdict]]:
    """Length-independence verdict for runs that differ only in the platoon size."""
    groups: Dict[Tuple[Tuple[str, str], ...], List[StringStabilityMetrics]] = {}
    for point, result in zip(points, results):
        if result.metrics is None:
            continue
        key = tuple((k, v) for k, v in point.values if k != N_AXIS)
        groups.setdefault(key, []).append(result.metrics)
    verdicts = []
    for key, metrics in groups.items():
        if len(metrics) < 2:
            continue
        verdict = scaling_verdict(sorted(metrics, key=lambda m: m.n_vehicles), tolerance)
        logger.info(f"Scaling verdict {dict(key) or '(all points)'}: spread {verdict.spread:.3f} -> "
                    f"{_verdict(verdict.passed)}")
        verdicts.append((key, verdict))
    return verdicts


def run_sweep(config: RunConfig, output_dir: Optional[Path] = None, workers: Optional[int] = None) -> SweepResult:
    """Evaluate every grid point, in parallel when more than one worker is allowed."""
    points = expand_grid(config)
    workers = max(1, min(workers or config.sweep_workers, len(points)))
    log_dir = str(Path(output_dir) / "points") if (output_dir is not None and config.sweep_write_logs) else None
    tasks = [(point, config.sweep_simulate, log_dir) for point in points]

    if workers == 1:
        results = [_run_task(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_run_task, tasks))

    result = SweepResult(rows=[r.row for r in results])
    if config.sweep_simulate and any(key == N_AXIS for key, _ in config.sweep_axes):
        result.scaling = scaling_groups(points, results)
    failed = sum(1 for row in result.rows if row.get("verdict") != "PASS")
    logger.info(f"Sweep finished: {len(points)} points, {failed} not passing, {workers} worker(s)")
    return result
