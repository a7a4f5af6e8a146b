import random
import threading

import numpy as np
import pytest

from rankpipe import config
from rankpipe.bench import zipf_cache_stats
from rankpipe.cache import CubeCache, GenerationMismatch, LFUIndex, QueryCache
from rankpipe.cube import CubeSnapshot, SparseParameter, build, sign
from rankpipe.models import write_synthetic_generation
from rankpipe.workload import calibrate_zipf, sample_ranks, zipf_cdf


class BruteForceLFU:
    """
    Reference LFU: evicts the minimal (frequency, insertion sequence) by a full scan.
    """

    def __init__(self, capacity):
        self.capacity = capacity
        self.entries = {}
        self.seq = 0

    def get(self, key):
        if key not in self.entries:
            return None
        value, freq, seq = self.entries[key]
        self.entries[key] = (value, freq + 1, seq)
        return value

    def insert(self, key, value):
        evicted = None
        if key in self.entries:
            del self.entries[key]
        elif len(self.entries) >= self.capacity:
            victim = min(self.entries, key=lambda k: self.entries[k][1:])
            evicted = (victim, self.entries.pop(victim)[0])
        self.entries[key] = (value, 1, self.seq)
        self.seq += 1
        return evicted


class TestLFUIndex:
    def test_evicts_least_frequent_then_oldest(self):
        index = LFUIndex(2)
        index.insert("a", 1)
        index.insert("b", 2)
        index.get("a")
        assert index.insert("c", 3) == ("b", 2)

        index.get("c")
        # a and c both at frequency 2, a was inserted first
        assert index.insert("d", 4) == ("a", 1)

    def test_matches_brute_force(self):
        rng = random.Random(7)
        index, oracle = LFUIndex(16), BruteForceLFU(16)
        for step in range(5000):
            key = int(rng.paretovariate(1.2)) % 64
            if rng.random() < 0.6:
                assert index.get(key) == oracle.get(key)
            else:
                assert index.insert(key, step) == oracle.insert(key, step)
        assert index.keys() == set(oracle.entries)

    def test_zero_capacity(self):
        index = LFUIndex(0)
        assert index.insert("a", 1) is None
        assert len(index) == 0

    def test_aging_halves_frequencies(self):
        index = LFUIndex(4, aging_period=4)
        index.insert("a", 1)
        for _ in range(3):
            index.get("a")
        assert index.frequency("a") == 4
        index.get("a")
        assert index.frequency("a") == 2

    def test_heap_stays_bounded_under_reads(self):
        index = LFUIndex(8)
        for key in range(8):
            index.insert(key, key)
        for step in range(20_000):
            index.get(step % 8)
        assert len(index._heap) <= len(index) + 2 * index.capacity + 64
        assert index.evict() == (0, 0)


@pytest.fixture
def snapshot(tmp_path):
    rng = np.random.default_rng(0)
    pairs = [(f"k{i}", SparseParameter(rng.normal(size=4))) for i in range(1000)]
    build(pairs, str(tmp_path / "cube"), generation=1)
    with CubeSnapshot.load(str(tmp_path / "cube")) as s:
        yield s


class TestCubeCache:
    def test_serves_same_values_as_snapshot(self, snapshot, tmp_path):
        cache = CubeCache.for_snapshot(
            snapshot, mem_ratio=0.01, disk_ratio=0.05, directory=str(tmp_path)
        )
        try:
            rng = np.random.default_rng(1)
            for _ in range(50):
                keys = [sign(f"k{int(r)}") for r in rng.zipf(1.3, size=20) % 1200]
                assert cache.get(snapshot, keys) == snapshot.lookup(keys)
        finally:
            cache.close()

    def test_levels_and_stats(self, snapshot, tmp_path):
        cache = CubeCache.for_snapshot(
            snapshot, mem_ratio=0.002, disk_ratio=0.01, directory=str(tmp_path)
        )
        try:
            assert cache.memory.capacity == 2
            assert cache.disk.capacity == 10

            keys = [sign(f"k{i}") for i in range(3)]
            cache.get(snapshot, keys)
            stats = cache.stats()
            assert stats.misses == 3
            assert stats.hits == 0

            cache.get(snapshot, keys)
            stats = cache.stats()
            assert stats.memory_hits == 2
            assert stats.disk_hits == 1
            assert stats.accesses == 6
            assert stats.hit_ratio == pytest.approx(0.5)
        finally:
            cache.close()

    def test_absent_keys_not_admitted(self, snapshot, tmp_path):
        cache = CubeCache.for_snapshot(snapshot, directory=str(tmp_path))
        try:
            assert cache.get(snapshot, [sign("missing")]) == [None]
            assert len(cache.disk) == 0
        finally:
            cache.close()

    def test_levels_are_exclusive(self, snapshot, tmp_path):
        cache = CubeCache.for_snapshot(
            snapshot, mem_ratio=0.01, disk_ratio=0.05, directory=str(tmp_path)
        )
        try:
            rng = np.random.default_rng(2)
            for _ in range(200):
                keys = [sign(f"k{int(r)}") for r in rng.zipf(1.2, size=20) % 1000]
                assert cache.get(snapshot, keys) == snapshot.lookup(keys)
                assert not cache.memory.keys() & cache.disk.keys()
            # both levels fill up and together hold the combined capacity
            assert len(cache.memory) + len(cache.disk) == 10 + 50
        finally:
            cache.close()

    def test_hit_ratio_grows_with_capacity(self, tmp_path):
        directory = str(tmp_path / "gen-1")
        write_synthetic_generation(directory, 1, key_universe=5000, embedding_dim=2, models={})
        ranks = sample_ranks(np.random.default_rng(0), zipf_cdf(1.0, 5000), 50_000)

        with CubeSnapshot.load(directory) as snapshot:
            ratios = [
                zipf_cache_stats(snapshot, ranks, 0.001, disk, str(tmp_path)).hit_ratio
                for disk in (0.002, 0.01, 0.05)
            ]
        assert ratios[0] < ratios[1] < ratios[2]

    def test_hit_ratio_on_calibrated_stream(self, tmp_path):
        universe = 20_000
        directory = str(tmp_path / "gen-1")
        write_synthetic_generation(directory, 1, key_universe=universe, embedding_dim=4, models={})
        exponent = calibrate_zipf(universe, 0.01, config.ZIPF_TOP_MASS)
        ranks = sample_ranks(np.random.default_rng(0), zipf_cdf(exponent, universe), 200_000)

        with CubeSnapshot.load(directory) as snapshot:
            stats = zipf_cache_stats(snapshot, ranks, 0.001, 0.01, str(tmp_path))
        assert 0.80 <= stats.hit_ratio <= 0.90
        assert stats.memory_hits > 0 and stats.disk_hits > 0

    def test_generation_mismatch_and_flush(self, snapshot, tmp_path):
        cache = CubeCache(1000, generation=0, directory=str(tmp_path))
        try:
            with pytest.raises(GenerationMismatch):
                cache.get(snapshot, [sign("k1")])

            cache.flush(snapshot.generation, snapshot.key_count)
            assert cache.get(snapshot, [sign("k1")]) == snapshot.lookup([sign("k1")])
        finally:
            cache.close()


class TestQueryCache:
    def test_window_expiry(self):
        cache = QueryCache(window=10, capacity=100, admission=0.0)
        cache.put("u1", "i1", 1, 0.8, now=0.0)

        assert cache.get("u1", "i1", 1, now=9.9) == 0.8
        assert cache.get("u1", "i1", 1, now=10.0) is None
        assert cache.stats().expired == 1

    def test_generation_is_part_of_the_key(self):
        cache = QueryCache(window=10, capacity=100, admission=0.0)
        cache.put("u1", "i1", 1, 0.8, now=0.0)
        assert cache.get("u1", "i1", 2, now=1.0) is None

    def test_admission_threshold(self):
        cache = QueryCache(window=10, capacity=100, admission=0.5)
        assert not cache.put("u1", "i1", 1, 0.4, now=0.0)
        assert cache.put("u1", "i2", 1, 0.5, now=0.0)
        assert cache.stats().rejected == 1

    def test_feedback_invalidates_user(self):
        cache = QueryCache(window=10, capacity=100, admission=0.0)
        for item in ("i1", "i2", "i3"):
            cache.put("u1", item, 1, 0.9, now=0.0)
        cache.put("u2", "i1", 1, 0.9, now=0.0)

        assert cache.feedback("u1") == 3
        assert cache.keys() == [("u2", "i1", 1)]
        assert cache.feedback("u1") == 0

    def test_feedback_races_with_reads_and_writes(self):
        cache = QueryCache(window=1e9, capacity=10_000, admission=0.0)
        stop = threading.Event()

        def reader():
            while not stop.is_set():
                for i in range(50):
                    cache.get("u1", f"i{i}", 1, now=0.0)

        readers = [threading.Thread(target=reader) for _ in range(4)]
        for thread in readers:
            thread.start()
        try:
            for _ in range(200):
                for i in range(50):
                    cache.put("u1", f"i{i}", 1, 0.9, now=0.0)
                cache.put("u2", "i0", 1, 0.9, now=0.0)
                assert cache.feedback("u1") == 50
                assert all(cache.get("u1", f"i{i}", 1, now=0.0) is None for i in range(50))
        finally:
            stop.set()
            for thread in readers:
                thread.join()

        assert cache.keys() == [("u2", "i0", 1)]
        stats = cache.stats()
        assert stats.invalidated == 200 * 50
        assert stats.inserts == 200 * 51

    def test_sweep(self):
        cache = QueryCache(window=10, capacity=100, admission=0.0)
        cache.put("u1", "i1", 1, 0.9, now=0.0)
        cache.put("u1", "i2", 1, 0.9, now=5.0)
        assert cache.sweep(now=12.0) == 1
        assert len(cache) == 1

    def test_matches_brute_force_lru(self):
        rng = random.Random(3)
        cache = QueryCache(window=1e9, capacity=8, admission=0.0)
        oracle = []
        for step in range(3000):
            key = (f"u{rng.randrange(4)}", f"i{rng.randrange(6)}", 1)
            if rng.random() < 0.5:
                hit = cache.get(*key, now=step)
                assert (hit is not None) == (key in oracle)
                if key in oracle:
                    oracle.remove(key)
                    oracle.append(key)
            else:
                cache.put(*key, 0.9, now=step)
                if key in oracle:
                    oracle.remove(key)
                elif len(oracle) >= 8:
                    oracle.pop(0)
                oracle.append(key)
            assert cache.keys() == oracle
