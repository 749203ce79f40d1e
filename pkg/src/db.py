#!/usr/bin/env python3
import os
import sqlite3
from typing import Any, Dict, List

from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

RUNS_COLUMNS = """
    run_id TEXT PRIMARY KEY,
    command TEXT NOT NULL,
    started TEXT NOT NULL,
    manifest_path TEXT,
    dataset_fingerprint TEXT,
    seed INTEGER
"""

RECORDS_COLUMNS = """
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    run_id TEXT NOT NULL REFERENCES runs(run_id),
    study TEXT NOT NULL,
    strategy TEXT NOT NULL,
    index_kind TEXT,
    k INTEGER,
    sweep_param TEXT,
    sweep_value REAL,
    recall REAL,
    qps_query REAL,
    qps_e2e REAL,
    scan_fraction REAL,
    preproc_ms REAL,
    dco_count INTEGER,
    within_count INTEGER,
    status TEXT
"""

RECORD_FIELDS = (
    "strategy", "index_kind", "k", "sweep_param", "sweep_value", "recall", "qps_query",
    "qps_e2e", "scan_fraction", "preproc_ms", "dco_count", "within_count", "status",
)

# Parallel bench runs may share one results.db; a locked database is retried.
_locked_retry = retry(
    stop=stop_after_attempt(5),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    retry=retry_if_exception_type(sqlite3.OperationalError),
    reraise=True,
)


class SQLiteClient:
    def __init__(self, db_path="results.db"):
        self.db_path = db_path
        self.ensure_db_exists()

    def ensure_db_exists(self):
        """Create database file if it doesn't exist"""
        if not os.path.exists(self.db_path):
            print(f"🔨 Creating database: {self.db_path}")

    @_locked_retry
    def execute_query(self, query: str, params=None) -> List[Dict[str, Any]]:
        """Execute one SQL statement; SELECTs return rows as dictionaries"""
        with sqlite3.connect(self.db_path) as conn:
            conn.row_factory = sqlite3.Row
            cursor = conn.cursor()
            cursor.execute(query, params or [])
            if query.strip().upper().startswith(("SELECT", "PRAGMA")):
                return [dict(row) for row in cursor.fetchall()]
            conn.commit()
            return [{"affected_rows": cursor.rowcount, "lastrowid": cursor.lastrowid}]

    @_locked_retry
    def execute_many(self, query: str, rows: List[list]) -> int:
        with sqlite3.connect(self.db_path) as conn:
            cursor = conn.cursor()
            cursor.executemany(query, rows)
            conn.commit()
            return cursor.rowcount

    def create_table(self, table_name: str, columns: str):
        self.execute_query(f"CREATE TABLE IF NOT EXISTS {table_name} ({columns})")

    def insert(self, table: str, data: Dict[str, Any], replace: bool = False) -> int:
        columns = ", ".join(data.keys())
        placeholders = ", ".join(["?" for _ in data])
        verb = "INSERT OR REPLACE" if replace else "INSERT"
        query = f"{verb} INTO {table} ({columns}) VALUES ({placeholders})"
        return self.execute_query(query, list(data.values()))[0]["lastrowid"]

    def select(self, table: str, where: str = None, params=None) -> List[Dict[str, Any]]:
        query = f"SELECT * FROM {table}"
        if where:
            query += f" WHERE {where}"
        return self.execute_query(query, params)

    def get_tables(self) -> List[str]:
        result = self.execute_query("SELECT name FROM sqlite_master WHERE type='table'")
        return [row["name"] for row in result]


class ResultsStore(SQLiteClient):
    """Bench records keyed by run id, next to the CSV output."""

    def __init__(self, db_path="results.db"):
        super().__init__(db_path)
        self.create_table("runs", RUNS_COLUMNS)
        self.create_table("records", RECORDS_COLUMNS)

    def add_run(self, run_id: str, command: str, started: str, manifest_path: str = None,
                dataset_fingerprint: str = None, seed: int = None):
        """Register a run; a rerun with the same id replaces the earlier run and its records."""
        self.execute_query("DELETE FROM records WHERE run_id = ?", [run_id])
        self.insert(
            "runs",
            {
                "run_id": run_id,
                "command": command,
                "started": started,
                "manifest_path": manifest_path,
                "dataset_fingerprint": dataset_fingerprint,
                "seed": seed,
            },
            replace=True,
        )

    def add_records(self, run_id: str, study: str, records) -> int:
        rows = []
        for rec in records:
            row = rec.as_dict()
            rows.append([run_id, study] + [row.get(field) for field in RECORD_FIELDS])
        columns = ", ".join(("run_id", "study") + RECORD_FIELDS)
        placeholders = ", ".join("?" for _ in range(len(RECORD_FIELDS) + 2))
        self.execute_many(f"INSERT INTO records ({columns}) VALUES ({placeholders})", rows)
        print(f"✅ Stored {len(rows)} {study} records for run {run_id} in {self.db_path}")
        return len(rows)

    def records_for(self, run_id: str) -> List[Dict[str, Any]]:
        return self.select("records", "run_id = ?", [run_id])
