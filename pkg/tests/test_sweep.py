import numpy as np
import pytest

from mesoplatoon.errors import ConfigurationError
from mesoplatoon.runconfig import build_run_config, load_config, parse_config_text
from mesoplatoon.sweep import expand_grid, grid_size, run_sweep

SHORT_RUN = """
scenario.dt = 0.05
scenario.t_end = 2.0
schedule.0.t = 0.0
schedule.0.v = 14.0
disturbance.enabled = false
limits.a_max = 1000.0
"""


def config_from(text):
    return build_run_config(parse_config_text(text, source="sweep.cfg"))


def test_grid_is_cross_product_in_declaration_order(config_dir):
    config = load_config(config_dir / "sweep_ab.cfg")
    points = expand_grid(config)
    assert grid_size(config) == 25
    assert [p.index for p in points] == list(range(25))
    assert dict(points[1].values) == {"controller.a": "0.0", "controller.b": "0.25"}
    assert points[5].config.scenario.controller.rho.a == 0.25
    assert points[5].config.scenario.controller.rho.b == 0.0
    assert all(p.config.sweep_axes == () for p in points)


def test_grid_above_cap_is_rejected():
    config = config_from("sweep.cap = 4\nsweep.axis.controller.a = 0, 1, 2\nsweep.axis.controller.b = 0, 1\n")
    with pytest.raises(ConfigurationError) as caught:
        expand_grid(config)
    assert "6 points" in str(caught.value)


def test_sweep_without_axes_is_rejected():
    with pytest.raises(ConfigurationError):
        expand_grid(config_from("run.name = flat\n"))


def test_invalid_grid_point_is_reported_before_running():
    config = config_from("sweep.axis.controller.k_dp = 1.0, -1.0\n")
    with pytest.raises(ConfigurationError) as caught:
        expand_grid(config)
    assert "sweep point 1" in str(caught.value)


def test_gain_grows_across_weight_grid(config_dir):
    result = run_sweep(load_config(config_dir / "sweep_ab.cfg"), workers=1)
    gains = np.array([row["gamma_tilde"] for row in result.rows]).reshape(5, 5)
    assert gains[0, 0] == 0.0
    assert np.all(np.diff(gains, axis=0) > 0)
    assert np.all(np.diff(gains, axis=1) > 0)
    table_row = result.rows[12]   # a = b = 0.5
    assert table_row["gamma_tilde"] == pytest.approx(0.5238, abs=1e-4)
    assert table_row["verdict"] == "PASS"
    assert result.rows[24]["certificate"] == "FAIL"
    assert result.scaling == []


def test_process_pool_matches_serial_run():
    config = config_from("sweep.axis.controller.a = 0.1, 0.9\n")
    serial = run_sweep(config, workers=1)
    pooled = run_sweep(config, workers=2)
    assert pooled.rows == serial.rows


def test_simulated_points_report_metrics_and_failures():
    config = config_from(SHORT_RUN + "scenario.n_vehicles = 4\nsweep.simulate = true\n"
                         "sweep.axis.scenario.divergence_limit = 1000000.0, 0.000001\n")
    rows = run_sweep(config, workers=1).rows
    assert rows[0]["status"] == "ok"
    assert rows[0]["within_bound"] in ("PASS", "FAIL")
    assert rows[0]["min_gap"] > 0
    assert rows[1]["status"].startswith("error: simulation diverged")
    assert rows[1]["verdict"] == "FAIL"


def test_platoon_size_axis_produces_scaling_verdict():
    config = config_from(SHORT_RUN + "ic.head_only = true\nsweep.simulate = true\n"
                         "sweep.axis.scenario.n_vehicles = 4, 8\n")
    result = run_sweep(config, workers=1)
    assert len(result.scaling) == 1
    group, verdict = result.scaling[0]
    assert group == ()
    assert [m.n_vehicles for m in verdict.metrics] == [4, 8]
    row = result.scaling_rows()[0]
    assert row["n_vehicles"] == "4,8"
    assert row["verdict"] in ("PASS", "FAIL")


def test_point_logs_are_written_when_requested(tmp_path):
    config = config_from(SHORT_RUN + "scenario.n_vehicles = 3\nsweep.simulate = true\nsweep.write_logs = true\n"
                         "sweep.axis.ic.seed = 1, 2\n")
    run_sweep(config, output_dir=tmp_path, workers=1)
    for index in (0, 1):
        directory = tmp_path / "points" / f"point_{index:03d}"
        assert (directory / "trajectory.csv").exists()
        assert (directory / "report.txt").exists()
        assert (directory / "report.cfg").exists()
