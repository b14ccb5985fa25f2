"""
In-memory cache for ground-truth density maps and other derived arrays.
"""
import hashlib
import logging
from collections import OrderedDict
from threading import Lock
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class CacheManager:
    """Thread-safe LRU cache."""

    def __init__(self, max_entries: int = 512):
        self._cache: "OrderedDict[str, Any]" = OrderedDict()
        self._lock = Lock()
        self.max_entries = max_entries
        self.hits = 0
        self.misses = 0

    def get(self, key: str) -> Optional[Any]:
        """
        Get cached value by key.

        Args:
            key: Cache key

        Returns:
            Cached value or None if not found
        """
        with self._lock:
            if key not in self._cache:
                self.misses += 1
                return None
            self._cache.move_to_end(key)
            self.hits += 1
            return self._cache[key]

    def set(self, key: str, value: Any) -> None:
        """Store ``value`` under ``key``, evicting the least recently used entry when full."""
        with self._lock:
            self._cache[key] = value
            self._cache.move_to_end(key)
            while len(self._cache) > self.max_entries:
                evicted, _ = self._cache.popitem(last=False)
                logger.debug(f"Cache evicted key: {evicted}")

    def get_or_set(self, key: str, factory: Callable[[], Any]) -> Any:
        """Return the cached value or compute, store and return it."""
        value = self.get(key)
        if value is None:
            value = factory()
            self.set(key, value)
        return value

    def clear(self) -> int:
        """Drop every entry, reset hit statistics and return how many entries there were."""
        with self._lock:
            count = len(self._cache)
            self._cache.clear()
            self.hits = 0
            self.misses = 0
        logger.debug(f"Cleared {count} cache entries")
        return count

    def stats(self) -> Dict[str, Any]:
        with self._lock:
            return {
                'entries': len(self._cache),
                'max_entries': self.max_entries,
                'hits': self.hits,
                'misses': self.misses,
            }


def density_cache_key(sample_id: str, sigma: float, shape: Tuple[int, int], points: np.ndarray) -> str:
    """
    Build a cache key that changes whenever the rasterisation inputs change.

    Args:
        sample_id: Identifier of the annotated sample
        sigma: Kernel width in pixels
        shape: (H, W) of the map
        points: N x 2 head coordinates
    """
    digest = hashlib.sha1(np.ascontiguousarray(points, dtype=np.float64).tobytes()).hexdigest()[:16]
    return f"density:{sample_id}:{sigma:g}:{shape[0]}x{shape[1]}:{digest}"


# Global cache of ground-truth density maps
density_cache = CacheManager()
