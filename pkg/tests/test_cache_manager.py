"""
Unit tests for the in-memory cache.
"""

import numpy as np
import pytest

from cache_manager import CacheManager, density_cache_key


@pytest.mark.unit
class TestCacheManager:
    """Test LRU eviction and statistics."""

    def test_get_set(self):
        cache = CacheManager()
        assert cache.get("k") is None
        cache.set("k", 3)
        assert cache.get("k") == 3
        assert cache.stats()["hits"] == 1
        assert cache.stats()["misses"] == 1

    def test_lru_eviction(self):
        cache = CacheManager(max_entries=2)
        cache.set("a", 1)
        cache.set("b", 2)
        cache.get("a")
        cache.set("c", 3)
        assert cache.get("b") is None
        assert cache.get("a") == 1 and cache.get("c") == 3

    def test_get_or_set_computes_once(self):
        cache = CacheManager()
        calls = []

        def factory():
            calls.append(1)
            return np.ones(3)

        cache.get_or_set("x", factory)
        cache.get_or_set("x", factory)
        assert len(calls) == 1
        assert cache.stats()["hits"] == 1

    def test_clear(self):
        cache = CacheManager()
        cache.set("density:a", 1)
        cache.set("density:b", 2)
        cache.get("density:a")
        assert cache.clear() == 2
        assert cache.stats() == {"entries": 0, "max_entries": 512, "hits": 0, "misses": 0}
        assert cache.get("density:a") is None


@pytest.mark.unit
class TestDensityCacheKey:

    def test_key_depends_on_inputs(self):
        points = np.array([[1.0, 2.0]])
        base = density_cache_key("img", 4.0, (32, 32), points)
        assert base == density_cache_key("img", 4.0, (32, 32), points.copy())
        assert base != density_cache_key("img", 2.0, (32, 32), points)
        assert base != density_cache_key("img", 4.0, (32, 40), points)
        assert base != density_cache_key("img", 4.0, (32, 32), points + 0.5)
