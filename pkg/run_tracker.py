"""
Run tracking for the CBSE toolkit.
Times pipeline stages, builds the RunRecord header embedded in every result
file and optionally keeps a SQLite history of runs.
"""
import sqlite3
import time
import json
from contextlib import contextmanager
from datetime import datetime
from typing import Dict, List, Optional
import logging
import os
from dataclasses import dataclass, asdict, field

TOOL_VERSION = "1.0.0"


@dataclass
class RunRecord:
    """Provenance of one command invocation"""
    command: str
    config: Dict
    input_hashes: Dict[str, str]
    seed: Optional[int]
    tool_version: str
    results: Dict = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    started_at: Optional[datetime] = None

    def to_dict(self, include_timings: bool = True) -> Dict:
        """Convert to dictionary for JSON serialization"""
        data = asdict(self)
        data.pop('started_at')
        data.pop('timings')
        if include_timings:
            data['timings'] = dict(self.timings)
            data['started_at'] = self.started_at.isoformat() if self.started_at else None
        return data


class RunTracker:
    """Stage timing and run history for a single command"""

    def __init__(self, command: str, config: Optional[Dict] = None, seed: Optional[int] = None,
                 db_path: Optional[str] = None, logger: Optional[logging.Logger] = None):
        self.command = command
        self.config = dict(config or {})
        self.seed = seed
        self.db_path = db_path
        self.logger = logger or logging.getLogger(__name__)
        self.input_hashes: Dict[str, str] = {}
        self.timings: Dict[str, float] = {}
        self.started_at = datetime.now()
        self.run_id = f"run_{int(time.time() * 1000)}"
        if self.db_path:
            self._init_database()

        self.logger.info(f"Run tracker initialized - {self.run_id}: {command}")

    def _init_database(self):
        """Initialize SQLite database for run history"""
        directory = os.path.dirname(self.db_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                run_id TEXT NOT NULL,
                timestamp TEXT NOT NULL,
                command TEXT NOT NULL,
                seed INTEGER,
                tool_version TEXT NOT NULL,
                total_seconds REAL NOT NULL,
                record_json TEXT NOT NULL
            )
        """)

        cursor.execute("""
            CREATE INDEX IF NOT EXISTS idx_command ON runs(command)
        """)

        conn.commit()
        conn.close()
        self.logger.info(f"Run history database initialized: {self.db_path}")

    def add_input(self, name: str, digest: str):
        self.input_hashes[name] = digest

    @contextmanager
    def stage(self, name: str):
        """Time a pipeline stage; repeated stages accumulate"""
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.timings[name] = self.timings.get(name, 0.0) + elapsed
            self.logger.debug(f"Stage {name} took {elapsed:.3f}s")

    def record(self, results: Optional[Dict] = None) -> RunRecord:
        return RunRecord(
            command=self.command,
            config=self.config,
            input_hashes=dict(sorted(self.input_hashes.items())),
            seed=self.seed,
            tool_version=TOOL_VERSION,
            results=dict(results or {}),
            timings=dict(self.timings),
            started_at=self.started_at,
        )

    def finish(self, results: Optional[Dict] = None) -> RunRecord:
        """Final record of the run, stored in the history when enabled"""
        record = self.record(results)
        if self.db_path:
            self._store_record(record)
        total = sum(self.timings.values())
        self.logger.info(f"Run {self.run_id} finished in {total:.3f}s")
        return record

    def _store_record(self, record: RunRecord):
        """Store run record in database"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute("""
            INSERT INTO runs
            (run_id, timestamp, command, seed, tool_version, total_seconds, record_json)
            VALUES (?, ?, ?, ?, ?, ?, ?)
        """, (
            self.run_id,
            self.started_at.isoformat(),
            record.command,
            record.seed,
            record.tool_version,
            sum(record.timings.values()),
            json.dumps(record.to_dict(), sort_keys=True, default=str)
        ))

        conn.commit()
        conn.close()

    def get_history_summary(self) -> Dict:
        """Run counts and total time per command"""
        if not self.db_path or not os.path.exists(self.db_path):
            return {"total_runs": 0, "commands": {}}

        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute("""
            SELECT command, COUNT(*), SUM(total_seconds)
            FROM runs
            GROUP BY command
            ORDER BY COUNT(*) DESC
        """)
        commands = {command: {"runs": count, "seconds": seconds or 0.0}
                    for command, count, seconds in cursor.fetchall()}
        conn.close()

        return {
            "total_runs": sum(c["runs"] for c in commands.values()),
            "commands": commands,
        }

    def recent_runs(self, limit: int = 10) -> List[Dict]:
        if not self.db_path or not os.path.exists(self.db_path):
            return []
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute("""
            SELECT record_json FROM runs ORDER BY id DESC LIMIT ?
        """, (limit,))
        rows = [json.loads(row[0]) for row in cursor.fetchall()]
        conn.close()
        return rows

    def print_run_summary(self):
        """Print formatted stage timings"""
        print("\n" + "="*50)
        print("⏱️ RUN SUMMARY")
        print("="*50)
        print(f"📋 Command: {self.command} ({self.run_id})")
        for name, seconds in self.timings.items():
            print(f"   {name}: {seconds:.3f}s")

        if self.db_path:
            history = self.get_history_summary()
            print(f"\n📚 History: {history['total_runs']} runs")
            for command, stats in history['commands'].items():
                print(f"   {command}: {stats['runs']} runs, {stats['seconds']:.1f}s")

        print("="*50)


# Global run tracker instance
_global_run_tracker: Optional[RunTracker] = None


def get_run_tracker() -> RunTracker:
    """Get or create global run tracker instance"""
    global _global_run_tracker
    if _global_run_tracker is None:
        _global_run_tracker = RunTracker("library")
    return _global_run_tracker


def initialize_run_tracking(command: str, config: Optional[Dict] = None, seed: Optional[int] = None,
                            db_path: Optional[str] = None) -> RunTracker:
    """Initialize global run tracking for a command"""
    global _global_run_tracker
    _global_run_tracker = RunTracker(command, config, seed, db_path)
    return _global_run_tracker
