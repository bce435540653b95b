"""
Run registry and audit logging service using sqlite backend.

Provides helpers to record finished runs into the ``runs`` table and the
operations that produced them into ``audit_logs``. Accepts a raw sqlite3
connection.
"""

import getpass
import json
import logging
import sqlite3
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


def _default_actor() -> str:
    try:
        return getpass.getuser()
    except Exception:  # no login name in some containers
        return "cli"


def record_run(conn: sqlite3.Connection, command: str, run_dir: str, status: str,
               method: Optional[str] = None, scene: Optional[str] = None, seed: Optional[int] = None,
               mse_avg: Optional[float] = None, sigma_avg: Optional[float] = None,
               wall_s: Optional[float] = None) -> int:
    cur = conn.execute(
        """
        INSERT INTO runs (command, method, scene, seed, run_dir, mse_avg, sigma_avg, wall_s, status)
        VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
        """,
        (command, method, scene, seed, run_dir, mse_avg, sigma_avg, wall_s, status),
    )
    conn.commit()
    return int(cur.lastrowid)


def record_audit(conn: sqlite3.Connection, command: str, target: str, action: str,
                 detail: Optional[Dict[str, Any]] = None, run_id: Optional[int] = None,
                 actor: Optional[str] = None) -> None:
    conn.execute(
        """
        INSERT INTO audit_logs (run_id, command, target, action, detail_json, actor)
        VALUES (?, ?, ?, ?, ?, ?)
        """,
        (
            run_id,
            command,
            target,
            action,
            json.dumps(detail, sort_keys=True) if detail is not None else None,
            actor or _default_actor(),
        )
    )
    conn.commit()
    logger.debug("audit: %s %s %s", command, action, target)
