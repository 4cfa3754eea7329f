"""
SQLite results store for run summaries
"""

import os
import sqlite3
from collections.abc import Generator
from contextlib import contextmanager

from src.logging_config import get_logger
from src.models import RunSummary

logger = get_logger(__name__)

SCHEMA_PATH = os.path.join(os.path.dirname(__file__), "..", "database", "schema.sql")


def get_database_path(out_dir: str | None = None) -> str:
    """Get the results database path: REBEL_RESULTS_DB, else <out_dir>/results.db"""
    configured = os.getenv("REBEL_RESULTS_DB")
    if configured:
        return configured
    return os.path.join(out_dir or "runs", "results.db")


@contextmanager
def get_db_connection(db_path: str | None = None) -> Generator[sqlite3.Connection]:
    """Get a database connection with proper configuration"""
    conn = sqlite3.connect(db_path or get_database_path())
    conn.row_factory = sqlite3.Row  # Enable dict-like access to rows
    try:
        yield conn
    finally:
        conn.close()


def init_database(db_path: str | None = None) -> str:
    """Create the database file and apply the schema; safe to call repeatedly"""
    db_path = db_path or get_database_path()
    directory = os.path.dirname(db_path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    with open(SCHEMA_PATH) as f:
        schema = f.read()

    with get_db_connection(db_path) as conn:
        conn.executescript(schema)
        conn.commit()
    return db_path


def execute_query(query: str, params: tuple = (), db_path: str | None = None) -> list:
    """Execute a query and return results"""
    with get_db_connection(db_path) as conn:
        cursor = conn.execute(query, params)
        return cursor.fetchall()


def execute_insert(query: str, params: tuple = (), db_path: str | None = None) -> int:
    """Execute an insert query and return the last row id"""
    with get_db_connection(db_path) as conn:
        cursor = conn.execute(query, params)
        conn.commit()
        return cursor.lastrowid


def record_run_summary(
    summary: RunSummary, command: str, out_dir: str, db_path: str | None = None
) -> int:
    """Insert one run summary and return its row id"""
    db_path = init_database(db_path)
    row_id = execute_insert(
        """
        INSERT INTO runs (command, algo, env, seed, T, batch_size, eta, gamma,
                          final_reward, final_kl_ref, suboptimality, best_suboptimality,
                          auc, duality_gap, wall_time, out_dir)
        VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        """,
        (
            command,
            summary.algo,
            summary.env,
            summary.seed,
            summary.T,
            summary.batch_size,
            summary.eta,
            summary.gamma,
            summary.final_reward,
            summary.final_kl_ref,
            summary.suboptimality,
            summary.best_suboptimality,
            summary.auc,
            summary.duality_gap,
            summary.wall_time,
            out_dir,
        ),
        db_path,
    )
    logger.debug(f"Recorded {command} run {summary.algo} as row {row_id} in {db_path}")
    return row_id


def list_runs(db_path: str | None = None, algo: str | None = None) -> list[sqlite3.Row]:
    """Stored runs in insertion order, optionally filtered by algorithm"""
    if algo is None:
        return execute_query("SELECT * FROM runs ORDER BY id", db_path=db_path)
    return execute_query("SELECT * FROM runs WHERE algo = ? ORDER BY id", (algo,), db_path)
