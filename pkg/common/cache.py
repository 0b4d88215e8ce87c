import os
import pickle
import sqlite3
import typing as t
import zlib
from pathlib import Path
from threading import Lock

from .config import CONFIG, REPO_ROOT


class ValueCache:
    """Sharded sqlite store for pathwise value samples, keyed by a query digest."""
    def __init__(self, cache_dir: t.Optional[Path] = None, parallelism: int = 8):
        if cache_dir is None:
            cache_dir = CONFIG.working_stage / "value_cache"
        self.cache_dir = Path(cache_dir)
        self.parallelism = parallelism
        self.db_locks = [Lock() for _ in range(parallelism)]
        self.dbs: t.Optional[t.List[sqlite3.Connection]] = None
        self._open_lock = Lock()

    def _open(self):
        # Opened on first use so importing the package never touches the disk.
        with self._open_lock:
            if self.dbs is not None:
                return
            os.makedirs(self.cache_dir, exist_ok=True)
            with open(REPO_ROOT / "configs" / "schemas" / "cache.sql", "r") as f:
                schema = f.read()
            dbs = []
            for i in range(self.parallelism):
                db = sqlite3.connect(self.cache_dir / f"cache_{i}.db", check_same_thread=False)
                db.executescript(schema)
                db.commit()
                dbs.append(db)
            self.dbs = dbs

    def _get_db(self, key: str) -> t.Tuple[sqlite3.Connection, Lock]:
        self._open()
        idx = zlib.adler32(key.encode()) % self.parallelism
        return self.dbs[idx], self.db_locks[idx]

    def get_object(self, key: str) -> t.Any:
        db, db_lock = self._get_db(key)
        with db_lock:
            cur = db.cursor()
            cur.execute("SELECT value FROM object_cache WHERE key = ?", (key,))
            result = cur.fetchone()
            if result is not None:
                return pickle.loads(result[0])
            return None

    def set_object(self, key: str, value: t.Any):
        value = pickle.dumps(value)
        db, db_lock = self._get_db(key)
        with db_lock:
            cur = db.cursor()
            cur.execute("REPLACE INTO object_cache (key, value) VALUES (?, ?)", (key, value))
            db.commit()

    def close(self):
        if self.dbs is None:
            return
        for db in self.dbs:
            db.close()
        self.dbs = None


VALUE_CACHE = ValueCache()
