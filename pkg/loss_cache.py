"""
Hash-keyed cache of loss tables.
One versioned JSON file per model content hash; robust games and sweeps
reuse the tables across invocations.
"""
import logging
import os
from pathlib import Path
from typing import Dict, Optional

from errors import ParseError
from lincontrol import SolverOptions, StateSpaceModel
from lossmap import LossTable, model_hash
from modelio import load_loss_table, save_loss_table


class LossTableCache:
    """Directory of `<model hash>.json` loss tables"""

    def __init__(self, cache_dir: str = ".cbse_cache"):
        self.cache_dir = Path(cache_dir)
        self.logger = logging.getLogger(__name__)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self.logger.info(f"Loss table cache initialized: {self.cache_dir}")

    def _entry_path(self, digest: str) -> Path:
        return self.cache_dir / f"{digest}.json"

    def get_cached_table(self, model: StateSpaceModel, mode: str,
                         options: Optional[SolverOptions] = None) -> Optional[LossTable]:
        """Cached table if present and consistent, otherwise None"""
        digest = model_hash(model, mode, options)
        path = self._entry_path(digest)
        if not path.exists():
            self.misses += 1
            return None

        try:
            table = load_loss_table(path)
        except ParseError as e:
            self.logger.warning(f"Ignoring unreadable cache entry {path.name}: {e}")
            self.misses += 1
            return None
        if table.model_id != digest or table.n != model.n:
            self.logger.warning(f"Ignoring stale cache entry {path.name}")
            self.misses += 1
            return None

        self.hits += 1
        self.logger.info(f"Cache hit for {model.name} ({mode}) - {digest[:12]}")
        return table

    def cache_table(self, table: LossTable):
        """Store a table under its model hash (atomic write)"""
        try:
            save_loss_table(table, self._entry_path(table.model_id))
            self.logger.debug(f"Cached loss table {table.model_id[:12]}")
        except OSError as e:
            self.logger.error(f"Error caching loss table: {e}")

    def get_cache_stats(self) -> Dict:
        """Get caching statistics"""
        entries = list(self.cache_dir.glob("*.json"))
        return {
            "cache_dir": str(self.cache_dir),
            "total_entries": len(entries),
            "total_bytes": sum(os.path.getsize(p) for p in entries),
            "hits": self.hits,
            "misses": self.misses,
        }

    def clear(self) -> int:
        removed = 0
        for path in self.cache_dir.glob("*.json"):
            path.unlink()
            removed += 1
        self.logger.info(f"Removed {removed} cache entries")
        return removed


# Global instance for easy access
_global_cache: Optional[LossTableCache] = None


def get_loss_cache(cache_dir: Optional[str] = None) -> LossTableCache:
    """Get or create global loss table cache instance"""
    global _global_cache
    if _global_cache is None or (cache_dir is not None and Path(cache_dir) != _global_cache.cache_dir):
        _global_cache = LossTableCache(cache_dir or os.getenv("CBSE_CACHE_DIR", ".cbse_cache"))
    return _global_cache
