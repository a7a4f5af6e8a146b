"""
The two caches in front of the cube and the scorer.

``CubeCache`` keeps hot sparse parameters in two exclusive LFU levels: a small memory level
holding values, and a larger disk level holding values in a local cache file. A key lives in
at most one level, so the levels add up to the combined capacity. ``QueryCache`` keeps
recent user-item scores in an LRU map that expires entries after a time window and drops
all entries of a user on feedback.
"""
import collections
import heapq
import itertools
import logging
import os
import tempfile
import threading
from dataclasses import dataclass, fields
from typing import Callable, Dict, Generic, Hashable, List, Optional, Set, Tuple, TypeVar

from . import config
from .cube import CubeSnapshot, SparseParameter
from .errors import RankpipeError
from .metrics import Metrics

LOG = logging.getLogger(__name__)

K = TypeVar("K", bound=Hashable)
V = TypeVar("V")


class GenerationMismatch(RankpipeError):
    def __init__(self, cached: int, serving: int) -> None:
        self.cached = cached
        self.serving = serving
        super().__init__(f"cache holds generation {cached} but snapshot is generation {serving}")


class LFUIndex(Generic[K, V]):
    """
    A fixed-capacity map evicting a key with minimal access frequency; among those, the key
    inserted longest ago. Stale heap entries are skipped lazily.

    Not thread-safe; callers hold their own lock.
    """

    def __init__(self, capacity: int, aging_period: Optional[int] = None) -> None:
        """
        :param capacity: maximum number of resident keys
        :param aging_period: halve all frequencies after this many accesses (None disables)
        """
        if capacity < 0:
            raise ValueError("capacity must not be negative")
        self.capacity = capacity
        self.aging_period = aging_period
        self._values: Dict[K, V] = {}
        self._freq: Dict[K, int] = {}
        self._seq: Dict[K, int] = {}
        self._heap: List[Tuple[int, int, K]] = []
        self._counter = itertools.count()
        self._accesses = 0

    def __len__(self):
        return len(self._values)

    def __contains__(self, key: K) -> bool:
        return key in self._values

    def keys(self) -> Set[K]:
        return set(self._values)

    def frequency(self, key: K) -> int:
        return self._freq.get(key, 0)

    def is_full(self) -> bool:
        return len(self._values) >= self.capacity

    def get(self, key: K) -> Optional[V]:
        """
        Returns the value of a resident key and counts the access, or None.
        """
        if key not in self._values:
            self._tick()
            return None
        self._freq[key] += 1
        heapq.heappush(self._heap, (self._freq[key], self._seq[key], key))
        value = self._values[key]
        self._tick()
        self._compact()
        return value

    def min_frequency(self) -> int:
        entry = self._peek()
        return entry[0] if entry else 0

    def insert(self, key: K, value: V, frequency: int = 1) -> Optional[Tuple[K, V]]:
        """
        Makes a key resident with the given frequency, evicting first if the index is full.
        Re-inserting a resident key replaces its value and resets its frequency.

        :return: the evicted (key, value) pair, if any
        """
        if self.capacity == 0:
            return None

        evicted = None
        if key in self._values:
            self._remove(key)
        elif self.is_full():
            evicted = self.evict()

        seq = next(self._counter)
        self._values[key] = value
        self._freq[key] = frequency
        self._seq[key] = seq
        heapq.heappush(self._heap, (frequency, seq, key))
        self._compact()
        return evicted

    def evict(self) -> Optional[Tuple[K, V]]:
        entry = self._peek()
        if entry is None:
            return None
        key = entry[2]
        value = self._values[key]
        self._remove(key)
        return key, value

    def pop(self, key: K) -> Optional[V]:
        """
        Removes a resident key and returns its value, or None.
        """
        if key not in self._values:
            return None
        value = self._values[key]
        self._remove(key)
        return value

    def clear(self) -> None:
        self._values.clear()
        self._freq.clear()
        self._seq.clear()
        self._heap.clear()
        self._accesses = 0

    def _remove(self, key: K) -> None:
        del self._values[key]
        del self._freq[key]
        del self._seq[key]

    def _valid(self, entry: Tuple[int, int, K]) -> bool:
        freq, seq, key = entry
        return self._seq.get(key) == seq and self._freq.get(key) == freq

    def _peek(self) -> Optional[Tuple[int, int, K]]:
        while self._heap and not self._valid(self._heap[0]):
            heapq.heappop(self._heap)
        return self._heap[0] if self._heap else None

    def _compact(self) -> None:
        # stale entries (superseded frequencies, removed keys) stay bounded
        if len(self._heap) - len(self._values) > 2 * self.capacity + 64:
            self._rebuild()

    def _rebuild(self) -> None:
        self._heap = [(self._freq[k], self._seq[k], k) for k in self._values]
        heapq.heapify(self._heap)

    def _tick(self) -> None:
        self._accesses += 1
        if self.aging_period and self._accesses >= self.aging_period:
            self._accesses = 0
            for key in self._freq:
                self._freq[key] = max(1, self._freq[key] // 2)
            self._rebuild()


class _DiskStore:
    """
    Fixed-size value slots in a local file; slots of evicted keys are reused.
    """

    def __init__(self, path: str) -> None:
        self.path = path
        self.fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o600)
        self.value_size = 0
        self._free: List[int] = []
        self._end = 0

    def write(self, param: SparseParameter) -> int:
        data = param.to_bytes()
        if not self.value_size:
            self.value_size = len(data)
        offset = self._free.pop() if self._free else self._end
        if offset == self._end:
            self._end += self.value_size
        os.pwrite(self.fd, data, offset)
        return offset

    def read(self, offset: int) -> SparseParameter:
        raw = os.pread(self.fd, self.value_size, offset)
        return SparseParameter.from_bytes(raw, self.value_size // 4 - 2)

    def release(self, offset: int) -> None:
        self._free.append(offset)

    def truncate(self) -> None:
        os.ftruncate(self.fd, 0)
        self.value_size = 0
        self._free = []
        self._end = 0

    def close(self) -> None:
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None


@dataclass
class CacheStats:
    accesses: int = 0
    memory_hits: int = 0
    disk_hits: int = 0
    misses: int = 0

    @property
    def hits(self) -> int:
        return self.memory_hits + self.disk_hits

    @property
    def hit_ratio(self) -> float:
        return self.hits / self.accesses if self.accesses else 0.0

    def add(self, other: "CacheStats") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    def to_dict(self) -> Dict[str, float]:
        return {
            "accesses": self.accesses,
            "memory_hits": self.memory_hits,
            "disk_hits": self.disk_hits,
            "misses": self.misses,
            "hit_ratio": self.hit_ratio,
        }


class CubeCache:
    """
    Two-level exclusive LFU cache of sparse parameters for one cube generation. Capacities
    are fractions of the cube's key count; memory and disk never hold the same key.
    """

    def __init__(
        self,
        key_count: int,
        generation: int,
        mem_ratio: float = config.CUBE_CACHE_MEM_RATIO,
        disk_ratio: float = config.CUBE_CACHE_DISK_RATIO,
        directory: str = None,
        aging: bool = True,
        metrics: Metrics = None,
    ) -> None:
        self.mem_ratio = mem_ratio
        self.disk_ratio = disk_ratio
        self.aging = aging
        self.generation = generation

        fd, path = tempfile.mkstemp(prefix="cube-cache-", suffix=".bin", dir=directory)
        os.close(fd)
        self._disk_store = _DiskStore(path)
        self._lock = threading.Lock()
        self._stats = CacheStats()
        self._resize(key_count)

        metrics = metrics or Metrics()
        self._memory_hits = metrics.counter("cube_cache_hits_total", level="memory")
        self._disk_hits = metrics.counter("cube_cache_hits_total", level="disk")
        self._misses = metrics.counter("cube_cache_misses_total")

    def _resize(self, key_count: int) -> None:
        mem = int(round(self.mem_ratio * key_count))
        disk = int(round(self.disk_ratio * key_count))
        self.memory: LFUIndex[int, SparseParameter] = LFUIndex(
            mem, 10 * mem if self.aging and mem else None
        )
        self.disk: LFUIndex[int, int] = LFUIndex(disk, 10 * disk if self.aging and disk else None)

    @classmethod
    def for_snapshot(cls, snapshot: CubeSnapshot, **kwargs) -> "CubeCache":
        return cls(snapshot.key_count, snapshot.generation, **kwargs)

    def get(self, snapshot: CubeSnapshot, keys: List[int]) -> List[Optional[SparseParameter]]:
        """
        Serves a batch of signatures from memory, disk, or the backing snapshot, in input
        order. Backing values are admitted to the memory level while it has room, otherwise
        to the disk level. A disk hit whose frequency exceeds the memory minimum moves to
        memory and the memory victim moves down to disk with its frequency.

        :raises GenerationMismatch: if the cache was not flushed for the snapshot's generation
        """
        results: List[Optional[SparseParameter]] = [None] * len(keys)
        stats = CacheStats(accesses=len(keys))
        pending: Dict[int, List[int]] = collections.defaultdict(list)

        with self._lock:
            if snapshot.generation != self.generation:
                raise GenerationMismatch(self.generation, snapshot.generation)
            for position, key in enumerate(keys):
                value = self.memory.get(key)
                if value is not None:
                    stats.memory_hits += 1
                    results[position] = value
                    continue

                offset = self.disk.get(key)
                if offset is not None:
                    stats.disk_hits += 1
                    value = self._disk_store.read(offset)
                    results[position] = value
                    self._promote(key, value)
                    continue

                stats.misses += 1
                pending[key].append(position)

        if pending:
            missing = list(pending)
            values = snapshot.lookup(missing)
            with self._lock:
                for key, value in zip(missing, values):
                    for position in pending[key]:
                        results[position] = value
                    if value is not None and snapshot.generation == self.generation:
                        self._admit(key, value)

        with self._lock:
            self._stats.add(stats)
        self._memory_hits.inc(stats.memory_hits)
        self._disk_hits.inc(stats.disk_hits)
        self._misses.inc(stats.misses)
        return results

    def _promote(self, key: int, value: SparseParameter) -> None:
        if self.memory.capacity == 0:
            return
        freq = self.disk.frequency(key)
        if self.memory.is_full():
            if freq <= self.memory.min_frequency():
                return
            victim_freq = self.memory.min_frequency()
            victim = self.memory.evict()
        else:
            victim = None

        self._disk_store.release(self.disk.pop(key))
        self.memory.insert(key, value, freq)
        if victim is not None:
            self._to_disk(victim[0], victim[1], victim_freq)

    def _to_disk(self, key: int, value: SparseParameter, frequency: int) -> None:
        if self.disk.capacity == 0:
            return
        if self.disk.is_full():
            self._disk_store.release(self.disk.evict()[1])
        self.disk.insert(key, self._disk_store.write(value), frequency)

    def _admit(self, key: int, value: SparseParameter) -> None:
        if key in self.memory or key in self.disk:
            return
        if self.memory.capacity and not self.memory.is_full():
            self.memory.insert(key, value)
        else:
            self._to_disk(key, value, 1)

    def flush(self, generation: int, key_count: int = None) -> None:
        """
        Empties both levels and rebinds the cache to a new generation.
        """
        with self._lock:
            if key_count is not None:
                self._resize(key_count)
            else:
                self.memory.clear()
                self.disk.clear()
            self._disk_store.truncate()
            LOG.info("flushed cube cache from generation %d to %d", self.generation, generation)
            self.generation = generation

    def stats(self) -> CacheStats:
        with self._lock:
            return CacheStats(**{f.name: getattr(self._stats, f.name) for f in fields(CacheStats)})

    def close(self) -> None:
        self._disk_store.close()
        try:
            os.unlink(self._disk_store.path)
        except OSError:
            pass


@dataclass
class QueryCacheStats:
    hits: int = 0
    misses: int = 0
    inserts: int = 0
    rejected: int = 0
    evicted: int = 0
    expired: int = 0
    invalidated: int = 0

    @property
    def hit_ratio(self) -> float:
        lookups = self.hits + self.misses
        return self.hits / lookups if lookups else 0.0

    def to_dict(self) -> Dict[str, float]:
        doc = {f.name: getattr(self, f.name) for f in fields(self)}
        doc["hit_ratio"] = self.hit_ratio
        return doc


QueryKey = Tuple[str, str, int]


class QueryCache:
    """
    LRU map of (user, item, generation) to the score computed at insert time. An entry is
    returned only while ``now - insert_time < window``.
    """

    def __init__(
        self,
        window: float = config.QUERY_CACHE_WINDOW,
        capacity: int = config.QUERY_CACHE_CAPACITY,
        admission: float = config.QUERY_CACHE_ADMISSION,
        metrics: Metrics = None,
        name: str = "default",
    ) -> None:
        if window <= 0 or capacity < 0:
            raise ValueError("window must be positive and capacity nonnegative")
        self.window = window
        self.capacity = capacity
        self.admission = admission
        self._entries: "collections.OrderedDict[QueryKey, Tuple[float, float]]" = (
            collections.OrderedDict()
        )
        self._by_user: Dict[str, Set[QueryKey]] = collections.defaultdict(set)
        self._lock = threading.Lock()
        self._stats = QueryCacheStats()

        metrics = metrics or Metrics()
        self._hits = metrics.counter("query_cache_hits_total", model=name)
        self._misses = metrics.counter("query_cache_misses_total", model=name)

    def __len__(self):
        return len(self._entries)

    def admits(self, score: float) -> bool:
        return score >= self.admission

    def get(self, user: str, item: str, generation: int, now: float) -> Optional[float]:
        key = (user, item, generation)
        with self._lock:
            entry = self._entries.get(key)
            if entry is not None and now - entry[1] >= self.window:
                self._drop(key)
                self._stats.expired += 1
                entry = None

            if entry is None:
                self._stats.misses += 1
                self._misses.inc()
                return None

            self._entries.move_to_end(key)
            self._stats.hits += 1
            self._hits.inc()
            return entry[0]

    def put(
        self,
        user: str,
        item: str,
        generation: int,
        score: float,
        now: float,
        admit: Callable[[float], bool] = None,
    ) -> bool:
        """
        Inserts a score if the admission predicate accepts it (by default: score at least
        the admission threshold), evicting the least-recently-used entry when full.

        :return: whether the score was inserted
        """
        admit = admit or self.admits
        with self._lock:
            if not admit(score) or self.capacity == 0:
                self._stats.rejected += 1
                return False

            key = (user, item, generation)
            if key in self._entries:
                self._entries.move_to_end(key)
            elif len(self._entries) >= self.capacity:
                old, _ = self._entries.popitem(last=False)
                self._unindex(old)
                self._stats.evicted += 1

            self._entries[key] = (score, now)
            self._by_user[user].add(key)
            self._stats.inserts += 1
            return True

    def feedback(self, user: str, kind: str = "click") -> int:
        """
        Invalidates every entry of a user.

        :return: number of invalidated entries
        """
        with self._lock:
            keys = self._by_user.pop(user, set())
            for key in keys:
                del self._entries[key]
            self._stats.invalidated += len(keys)
        if keys:
            LOG.debug("%s feedback from user %s invalidated %d scores", kind, user, len(keys))
        return len(keys)

    def sweep(self, now: float) -> int:
        """
        Removes all expired entries.

        :return: number of removed entries
        """
        with self._lock:
            expired = [k for k, (_, t) in self._entries.items() if now - t >= self.window]
            for key in expired:
                self._drop(key)
            self._stats.expired += len(expired)
        return len(expired)

    def flush(self) -> None:
        with self._lock:
            self._entries.clear()
            self._by_user.clear()

    def keys(self) -> List[QueryKey]:
        with self._lock:
            return list(self._entries)

    def stats(self) -> QueryCacheStats:
        with self._lock:
            return QueryCacheStats(
                **{f.name: getattr(self._stats, f.name) for f in fields(QueryCacheStats)}
            )

    def _drop(self, key: QueryKey) -> None:
        del self._entries[key]
        self._unindex(key)

    def _unindex(self, key: QueryKey) -> None:
        keys = self._by_user.get(key[0])
        if keys is not None:
            keys.discard(key)
            if not keys:
                del self._by_user[key[0]]


class QueryCacheSweeper:
    """
    Background thread expiring query cache entries every ``interval`` seconds.
    """

    def __init__(self, caches: List[QueryCache], clock: Callable[[], float], interval: float):
        self.caches = caches
        self.clock = clock
        self.interval = interval
        self.stopped = threading.Event()
        self._thread = threading.Thread(target=self.run, name="query-cache-sweeper", daemon=True)

    def run(self) -> None:
        while not self.stopped.wait(self.interval):
            now = self.clock()
            removed = sum(cache.sweep(now) for cache in self.caches)
            if removed:
                LOG.debug("swept %d expired query cache entries", removed)

    def start(self) -> "QueryCacheSweeper":
        self._thread.start()
        return self

    def close(self) -> None:
        self.stopped.set()
        self._thread.join(timeout=2)
