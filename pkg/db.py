# =========================================================
# db.py - DuckDB run registry
# ---------------------------------------------------------
# fallout.duckdb 단일 파일에 실행 이력을 기록.
# runs (manifest) / flip_events (per-run events) / campaign_results.
# Writes are best-effort: register_run() never raises.
# =========================================================

import json
import logging
from contextlib import contextmanager
from pathlib import Path

import duckdb
import pandas as pd

import config
from memmodel import FlipEvent
from runlog import RunManifest

log = logging.getLogger("DB")

# ─────────────────────────────────────────────
# 테이블 스키마
# ─────────────────────────────────────────────
_SCHEMA_STATEMENTS = [
    """CREATE TABLE IF NOT EXISTS runs (
    run_id        TEXT PRIMARY KEY,
    subcommand    TEXT NOT NULL,
    seed          BIGINT,
    tool_version  TEXT,
    started_at    TEXT,
    finished_at   TEXT,
    exit_code     INTEGER,
    config_json   TEXT,
    outputs_json  TEXT
)""",
    """CREATE TABLE IF NOT EXISTS flip_events (
    run_id        TEXT NOT NULL,
    t_s           DOUBLE,
    byte_offset   BIGINT,
    bit_index     INTEGER,
    direction     TEXT,
    detected      TEXT,
    detected_at_s DOUBLE
)""",
    """CREATE TABLE IF NOT EXISTS campaign_results (
    run_id        TEXT PRIMARY KEY,
    fixture       TEXT,
    spray_fraction DOUBLE,
    trials        BIGINT,
    no_effect     BIGINT,
    crash         BIGINT,
    escalation    BIGINT,
    silent        BIGINT
)""",
    "CREATE INDEX IF NOT EXISTS idx_events_run ON flip_events (run_id)",
]

EVENT_COLUMNS = ["run_id", "t_s", "byte_offset", "bit_index", "direction", "detected", "detected_at_s"]


# ─────────────────────────────────────────────
# 연결
# ─────────────────────────────────────────────

@contextmanager
def get_conn(db_path: Path | str | None = None):
    """레지스트리 연결: 정상 종료 시 commit, 예외 시 rollback."""
    conn = duckdb.connect(str(db_path or config.DB_PATH))
    try:
        yield conn
        conn.commit()
    except Exception:
        conn.rollback()
        raise
    finally:
        conn.close()


def init_db(db_path: Path | str | None = None):
    with get_conn(db_path) as conn:
        for stmt in _SCHEMA_STATEMENTS:
            conn.execute(stmt)
    log.info("Registry ready: %s", db_path or config.DB_PATH)


# ─────────────────────────────────────────────
# 쓰기
# ─────────────────────────────────────────────

def _insert_df(conn, df: pd.DataFrame, table: str):
    conn.register("_insert_tmp", df)
    conn.execute(f"INSERT INTO {table} SELECT * FROM _insert_tmp")
    conn.unregister("_insert_tmp")


def save_manifest(manifest: RunManifest, db_path: Path | str | None = None):
    with get_conn(db_path) as conn:
        conn.execute("DELETE FROM runs WHERE run_id = ?", [manifest.run_id])
        conn.execute(
            """INSERT INTO runs
               (run_id, subcommand, seed, tool_version, started_at, finished_at,
                exit_code, config_json, outputs_json)
               VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)""",
            [manifest.run_id, manifest.subcommand, manifest.seed, manifest.tool_version,
             manifest.started_at, manifest.finished_at, manifest.exit_code,
             json.dumps(manifest.config, sort_keys=True, default=str),
             json.dumps(manifest.outputs, sort_keys=True)],
        )
    log.info("Registered run %s (%s)", manifest.run_id, manifest.subcommand)


def save_events(run_id: str, events: list[FlipEvent], db_path: Path | str | None = None):
    if not events:
        return
    df = pd.DataFrame(
        [[run_id, e.t_s, e.byte_offset, e.bit_index, e.direction.value, e.detected.value,
          e.detected_at_s] for e in events],
        columns=EVENT_COLUMNS,
    )
    df["detected_at_s"] = df["detected_at_s"].astype("float64")
    with get_conn(db_path) as conn:
        conn.execute("DELETE FROM flip_events WHERE run_id = ?", [run_id])
        _insert_df(conn, df, "flip_events")
    log.info("Saved %d flip events for %s", len(df), run_id)


def save_campaign(run_id: str, summary: dict, fixture: str, spray_fraction: float,
                  db_path: Path | str | None = None):
    with get_conn(db_path) as conn:
        conn.execute("DELETE FROM campaign_results WHERE run_id = ?", [run_id])
        conn.execute(
            "INSERT INTO campaign_results VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
            [run_id, fixture, spray_fraction, summary["trials"], summary["no_effect"],
             summary["crash"], summary["escalation"], summary["silent"]],
        )


def register_run(manifest: RunManifest, events: list[FlipEvent] | None = None,
                 campaign: dict | None = None, db_path: Path | str | None = None) -> bool:
    """Record a finished run. Failures are logged and swallowed."""
    if not config.REGISTER_RUNS and db_path is None:
        return False
    try:
        init_db(db_path)
        save_manifest(manifest, db_path)
        if events:
            save_events(manifest.run_id, events, db_path)
        if campaign is not None:
            save_campaign(manifest.run_id, campaign["summary"], campaign["fixture"],
                          campaign["spray_fraction"], db_path)
        return True
    except Exception as e:
        log.warning("Run %s not registered: %s", manifest.run_id, e)
        return False


# ─────────────────────────────────────────────
# 읽기
# ─────────────────────────────────────────────

def load_runs(subcommand: str | None = None, limit: int = 50,
              db_path: Path | str | None = None) -> pd.DataFrame:
    with get_conn(db_path) as conn:
        try:
            if subcommand:
                df = conn.execute(
                    "SELECT * FROM runs WHERE subcommand = ? ORDER BY started_at DESC LIMIT ?",
                    [subcommand, limit],
                ).df()
            else:
                df = conn.execute(
                    "SELECT * FROM runs ORDER BY started_at DESC LIMIT ?", [limit],
                ).df()
        except duckdb.Error:
            return pd.DataFrame()
    return df


def load_events(run_id: str, db_path: Path | str | None = None) -> pd.DataFrame:
    with get_conn(db_path) as conn:
        try:
            df = conn.execute(
                "SELECT * FROM flip_events WHERE run_id = ? ORDER BY t_s, byte_offset, bit_index",
                [run_id],
            ).df()
        except duckdb.Error:
            return pd.DataFrame()
    return df


def load_campaigns(db_path: Path | str | None = None) -> pd.DataFrame:
    with get_conn(db_path) as conn:
        try:
            return conn.execute("SELECT * FROM campaign_results").df()
        except duckdb.Error:
            return pd.DataFrame()
