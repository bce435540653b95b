"""
Lightweight SQLite run registry.

This module provides helper functions to locate the output root, open
registry connections and initialize the schema. It uses Python's built-in
sqlite3 module. Each connection uses a row factory so that query results
can be accessed as dictionaries.

The registry lives outside run directories: wall-clock times and run
timestamps are kept here so that run directories themselves stay
reproducible.
"""

import os
import sqlite3
from typing import Optional

DEFAULT_OUTPUT_ROOT = "runs"


def output_root() -> str:
    """Default directory for run and scene outputs (``EQOPT_OUTPUT_ROOT``)."""
    return os.path.abspath(os.getenv("EQOPT_OUTPUT_ROOT", DEFAULT_OUTPUT_ROOT))


def get_db_path() -> str:
    """Registry path: ``EQOPT_DB_PATH`` or ``<output root>/registry.db``."""
    return os.path.abspath(os.getenv("EQOPT_DB_PATH", os.path.join(output_root(), "registry.db")))


def get_connection(db_path: Optional[str] = None) -> sqlite3.Connection:
    """Return a connection to the registry with dictionary-like rows."""
    conn = sqlite3.connect(db_path or get_db_path())
    conn.row_factory = sqlite3.Row
    return conn


def init_db(db_path: Optional[str] = None) -> str:
    """Initialize registry tables if they do not exist; returns the path."""
    path = db_path or get_db_path()
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with get_connection(path) as conn:
        c = conn.cursor()
        # one row per command invocation that produced outputs
        c.execute(
            """
            CREATE TABLE IF NOT EXISTS runs (
                run_id INTEGER PRIMARY KEY AUTOINCREMENT,
                command TEXT NOT NULL,
                method TEXT,
                scene TEXT,
                seed INTEGER,
                run_dir TEXT NOT NULL,
                mse_avg REAL,
                sigma_avg REAL,
                wall_s REAL,
                status TEXT NOT NULL,
                created_at TEXT NOT NULL DEFAULT CURRENT_TIMESTAMP
            )
            """
        )
        c.execute(
            """
            CREATE TABLE IF NOT EXISTS audit_logs (
                audit_id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id INTEGER,
                command TEXT NOT NULL,
                target TEXT NOT NULL,
                action TEXT NOT NULL,
                detail_json TEXT,
                actor TEXT NOT NULL,
                created_at TEXT NOT NULL DEFAULT CURRENT_TIMESTAMP,
                FOREIGN KEY(run_id) REFERENCES runs(run_id)
            )
            """
        )
        conn.commit()
    return path
