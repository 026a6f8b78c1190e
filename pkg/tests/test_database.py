import pytest

from mesoplatoon.config import RUN_DATABASE_NAME
from mesoplatoon.database import Database, RunRecord, sqlite_url


@pytest.fixture
def registry(tmp_path):
    db = Database(tmp_path / "runs", database_url=sqlite_url(tmp_path / "runs"))
    yield db
    db.close()


def record(**kwargs):
    values = dict(command="simulate", config_name="reference_cp", config_sha256="0" * 64, policy="constant",
                  seed=0, dt=0.01, n_vehicles=31)
    values.update(kwargs)
    return RunRecord(**values)


def test_registry_file_lives_in_output_directory(registry, tmp_path):
    assert registry.enabled
    assert (tmp_path / "runs" / RUN_DATABASE_NAME).exists()


def test_record_and_fetch(registry):
    run_id = registry.record_run(record(seed=4))
    assert run_id is not None
    stored = registry.get_run(run_id)
    assert stored.id == run_id
    assert stored.command == "simulate"
    assert stored.seed == 4
    assert stored.dt == 0.01
    assert stored.created is not None
    assert stored.verdict is None


def test_unknown_run_is_none(registry):
    assert registry.get_run(999) is None


def test_list_runs_newest_first(registry):
    ids = [registry.record_run(record(seed=seed)) for seed in range(5)]
    listed = registry.list_runs(limit=3)
    assert [run.id for run in listed] == ids[::-1][:3]


def test_unusable_url_falls_back_to_sqlite(tmp_path):
    db = Database(tmp_path / "out", database_url="sqlite:////nonexistent-dir/deeper/runs.sqlite")
    try:
        assert db.enabled
        assert db.database_url == sqlite_url(tmp_path / "out")
        assert db.record_run(record()) is not None
    finally:
        db.close()


def test_disabled_registry_records_nothing(registry):
    registry.enabled = False
    assert registry.record_run(record()) is None
    assert registry.get_run(1) is None
    assert registry.list_runs() == []
