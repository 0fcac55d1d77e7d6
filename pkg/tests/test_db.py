import pytest

import db
from memmodel import ALL_ONES, Detection, make_flip_event
from runlog import RunManifest


@pytest.fixture
def db_path(tmp_path):
    return tmp_path / "registry.duckdb"


def _manifest(subcommand="simulate", seed=1):
    return RunManifest(subcommand=subcommand, config={"seed": seed}, seed=seed,
                       outputs={"primary": f"{subcommand}.jsonl"}).finish(0)


def test_register_and_load(db_path):
    events = [
        make_flip_event(ALL_ONES, 1.0, 10, 3, 4096, detected=Detection.DETECTED, detected_at_s=2.0),
        make_flip_event(ALL_ONES, 0.5, 20, 0, 4096),
    ]
    m = _manifest()
    assert db.register_run(m, events=events, db_path=db_path)

    runs = db.load_runs(db_path=db_path)
    assert runs["run_id"].tolist() == [m.run_id]
    assert runs.iloc[0]["exit_code"] == 0

    stored = db.load_events(m.run_id, db_path=db_path)
    assert stored["t_s"].tolist() == [0.5, 1.0]
    assert stored["detected"].tolist() == ["pending", "detected"]


def test_campaign_results(db_path):
    m = _manifest("campaign")
    summary = {"record": "summary", "trials": 10, "no_effect": 7, "crash": 1, "escalation": 1, "silent": 1}
    db.register_run(m, campaign={"summary": summary, "fixture": "suid_ping", "spray_fraction": 0.005},
                    db_path=db_path)
    df = db.load_campaigns(db_path=db_path)
    assert df.iloc[0]["escalation"] == 1
    assert df.iloc[0]["fixture"] == "suid_ping"


def test_reregistering_replaces(db_path):
    m = _manifest()
    db.register_run(m, db_path=db_path)
    db.register_run(m, db_path=db_path)
    assert len(db.load_runs(db_path=db_path)) == 1


def test_filter_by_subcommand(db_path):
    db.register_run(_manifest("simulate"), db_path=db_path)
    db.register_run(_manifest("estimate"), db_path=db_path)
    assert db.load_runs("estimate", db_path=db_path)["subcommand"].tolist() == ["estimate"]


def test_empty_registry_reads_as_empty(db_path):
    assert db.load_runs(db_path=db_path).empty
    assert db.load_campaigns(db_path=db_path).empty


def test_registration_is_best_effort(tmp_path):
    # a directory cannot be opened as a database file
    assert db.register_run(_manifest(), db_path=tmp_path) is False


def test_registration_off_by_config():
    # the autouse fixture turns registration off
    assert db.register_run(_manifest()) is False
