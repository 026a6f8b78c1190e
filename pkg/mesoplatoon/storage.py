"""Run artifacts on disk: trajectory CSVs, manifests, reports and sweep tables.

Every file is written to a temporary sibling first and moved into place, so a
failed run never leaves a half-written artifact behind.
"""

import logging
import os
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .config import CSV_SIGNIFICANT_DIGITS
from .errors import ConfigurationError, SchemaError
from .macro import predecessor_psi
from .models import Scenario, StabilityReport, TrajectoryLog
from .runconfig import RunConfig, config_items
from .stability import report_summary, report_text

logger = logging.getLogger(__name__)

TRAJECTORY_FILE = "trajectory.csv"
MANIFEST_FILE = "manifest.cfg"
REPORT_TEXT_FILE = "report.txt"
REPORT_SUMMARY_FILE = "report.cfg"
SWEEP_TABLE_FILE = "sweep.csv"

PSI_CHUNK_ROWS = 2000


def trajectory_columns(n_vehicles: int, rho_dim: int) -> List[str]:
    """Header of a trajectory CSV."""
    columns = ["t", "v_ref"]
    for i in range(n_vehicles):
        columns += [f"dp_{i}", f"dv_{i}"]
        columns += [f"rho{k + 1}_{i}" for k in range(rho_dim)]
        columns += [f"u_cmd_{i}", f"u_app_{i}"]
    return columns


def _replace_into(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_text(path: Path, text: str) -> Path:
    path = Path(path)

    def write(tmp: str) -> None:
        with open(tmp, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)

    _replace_into(path, write)
    return path


def trajectory_frame(log: TrajectoryLog) -> pd.DataFrame:
    n, r = log.n_pairs, log.rho.shape[-1]
    data: Dict[str, np.ndarray] = {"t": log.t, "v_ref": log.v_ref}
    for i in range(n):
        data[f"dp_{i}"] = log.dp[:, i]
        data[f"dv_{i}"] = log.dv[:, i]
        for k in range(r):
            data[f"rho{k + 1}_{i}"] = log.rho[:, i, k]
        data[f"u_cmd_{i}"] = log.u_cmd[:, i]
        data[f"u_app_{i}"] = log.u_app[:, i]
    return pd.DataFrame(data, columns=trajectory_columns(n, r))


def write_trajectory_csv(log: TrajectoryLog, path: Path) -> Path:
    """One row per sample, floats at CSV_SIGNIFICANT_DIGITS significant digits."""
    path = Path(path)
    frame = trajectory_frame(log)
    _replace_into(path, lambda tmp: frame.to_csv(tmp, index=False, float_format=f"%.{CSV_SIGNIFICANT_DIGITS}g"))
    logger.info(f"Wrote trajectory ({len(frame)} rows, {log.n_pairs} vehicles) to {path}")
    return path


def _psi_in_chunks(dp: np.ndarray, dv: np.ndarray, scenario: Scenario) -> Tuple[np.ndarray, np.ndarray]:
    psi_dp = np.empty_like(dp)
    psi_dv = np.empty_like(dv)
    for start in range(0, dp.shape[0], PSI_CHUNK_ROWS):
        rows = slice(start, start + PSI_CHUNK_ROWS)
        psi_dp[rows], psi_dv[rows] = predecessor_psi(dp[rows], dv[rows], scenario.eq, scenario.controller.rho)
    return psi_dp, psi_dv


def read_trajectory_csv(path: Path, scenario: Scenario) -> TrajectoryLog:
    """Load a trajectory written by write_trajectory_csv for the given scenario.

    The macroscopic inputs are recomputed from the stored pair states and the
    leader position is rebuilt from the reference speed.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise ConfigurationError("trajectory file not found", source=str(path)) from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise SchemaError(f"{path}: cannot parse trajectory: {e}") from None

    n, r = scenario.n_vehicles, scenario.controller.policy.rho_dim
    expected = trajectory_columns(n, r)
    if list(frame.columns) != expected:
        found = list(frame.columns)
        missing = [c for c in expected if c not in found]
        extra = [c for c in found if c not in expected]
        raise SchemaError(
            f"{path}: columns do not match a {scenario.controller.policy.value}-policy run with "
            f"{n} vehicles (missing {missing[:4]}, unexpected {extra[:4]})"
        )
    if len(frame) != scenario.n_steps + 1:
        raise SchemaError(f"{path}: expected {scenario.n_steps + 1} rows, found {len(frame)}")
    try:
        values = frame.to_numpy(dtype=float)
    except ValueError as e:
        raise SchemaError(f"{path}: non-numeric entries: {e}") from None
    t = values[:, 0]
    if not np.allclose(t, np.arange(len(t)) * scenario.dt, rtol=0, atol=1e-6 * max(1.0, scenario.t_end)):
        raise SchemaError(f"{path}: time column does not follow dt={scenario.dt}")

    per_vehicle = values[:, 2:].reshape(len(t), n, 4 + r)
    dp, dv = per_vehicle[..., 0], per_vehicle[..., 1]
    rho = per_vehicle[..., 2:2 + r]
    u_cmd, u_app = per_vehicle[..., 2 + r], per_vehicle[..., 3 + r]
    v_ref = values[:, 1]
    leader_p = np.concatenate([[0.0], np.cumsum(v_ref[:-1] * scenario.dt)])
    psi_dp, psi_dv = _psi_in_chunks(dp, dv, scenario)
    logger.info(f"Read trajectory {path}: {len(t)} samples, {n} vehicles")
    return TrajectoryLog(
        t=t, v_ref=v_ref, leader_p=leader_p, dp=np.ascontiguousarray(dp), dv=np.ascontiguousarray(dv),
        rho=np.ascontiguousarray(rho), u_cmd=np.ascontiguousarray(u_cmd), u_app=np.ascontiguousarray(u_app),
        psi_dp=psi_dp, psi_dv=psi_dv, scenario=scenario,
    )


def flat_text(items: Iterable[Tuple[str, str]]) -> str:
    return "".join(f"{key} = {value}\n" for key, value in items)


def manifest_items(config: RunConfig, config_path: Optional[str], config_sha256: Optional[str],
                   run_id: Optional[int], created: Optional[datetime] = None) -> List[Tuple[str, str]]:
    """Config echo followed by the reproducibility keys."""
    created = created or datetime.now(timezone.utc)
    return config_items(config) + [
        ("manifest.seed", str(config.seed)),
        ("manifest.dt", repr(config.dt)),
        ("manifest.version", __version__),
        ("manifest.created", created.isoformat(timespec="seconds")),
        ("manifest.config_path", config_path or ""),
        ("manifest.config_sha256", config_sha256 or ""),
        ("manifest.run_id", "" if run_id is None else str(run_id)),
    ]


def write_manifest(directory: Path, items: Sequence[Tuple[str, str]]) -> Path:
    path = write_text(Path(directory) / MANIFEST_FILE, flat_text(items))
    logger.info(f"Wrote manifest to {path}")
    return path


def write_report(directory: Path, report: StabilityReport) -> Tuple[Path, Path]:
    """report.txt for people, report.cfg as flat key/value pairs."""
    directory = Path(directory)
    text_path = write_text(directory / REPORT_TEXT_FILE, report_text(report))
    summary_path = write_text(directory / REPORT_SUMMARY_FILE, flat_text(report_summary(report).items()))
    logger.info(f"Wrote report to {text_path} and {summary_path}")
    return text_path, summary_path


def write_sweep_table(rows: Sequence[Dict[str, object]], path: Path) -> Path:
    path = Path(path)
    frame = pd.DataFrame(list(rows))
    _replace_into(path, lambda tmp: frame.to_csv(tmp, index=False, float_format="%.10g"))
    logger.info(f"Wrote sweep table ({len(frame)} points) to {path}")
    return path
