"""
Synthetic traffic: Zipf-distributed sparse features, recurring user-item pairs, a diurnal
arrival rate, and replay of such traces against a scoring target.

Trace files hold one JSON record per line, in timestamp order::

    {"timestamp": 0.013, "user": "u17", "qid": "q3",
     "user_features": {"u_profile": ["k0", "k912"], ...},
     "candidates": [{"item": "i4", "escore": 0.51, "features": {"i_tag": ["k3", "k0"]}}, ...],
     "feedback": [{"user": "u17", "kind": "click", "timestamp": 2.4, "item": "i4"}]}

Feature ``k<r>`` is the raw feature of Zipf rank r (``k0`` is the most frequent).
"""
import collections
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Deque, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, RankpipeError
from .models import ITEM_GROUPS, USER_GROUPS
from .schema import Candidate, ScoreRequest, ScoreResponse

LOG = logging.getLogger(__name__)

# relative arrival rate per hour of the day, with a midday and a late-evening peak
DEFAULT_DIURNAL_PROFILE = (
    0.35, 0.25, 0.18, 0.15, 0.15, 0.20, 0.35, 0.55, 0.75, 0.85, 0.90, 1.00,
    1.05, 0.95, 0.85, 0.80, 0.85, 0.95, 1.10, 1.30, 1.45, 1.50, 1.20, 0.70,
)  # fmt: skip

LATENCY_BUCKETS_MS = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000, 5000)


class Unachievable(RankpipeError):
    def __init__(self, top_fraction: float, mass_fraction: float) -> None:
        self.top_fraction = top_fraction
        self.mass_fraction = mass_fraction
        super().__init__(
            f"no finite Zipf exponent puts {mass_fraction:g} of the mass on the top "
            f"{top_fraction:g} of ranks"
        )


class PipelineUnavailable(RankpipeError):
    def __init__(self, cause: Any) -> None:
        self.cause = cause
        super().__init__(f"scoring target is not serving: {cause}")


class TraceError(RankpipeError):
    def __init__(self, path: str, line: int, reason: str) -> None:
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


@dataclass
class WorkloadSpec:
    key_universe: int = 100_000
    zipf_exponent: float = 1.0
    user_count: int = 10_000
    item_count: int = 50_000
    recurrence_prob: float = 0.6
    recurrence_window: float = 120.0
    diurnal_profile: Sequence[float] = DEFAULT_DIURNAL_PROFILE
    duration: float = 600.0
    base_rate: float = 20.0
    seed: int = 0
    day_length: float = 86_400.0
    candidates: int = 50
    features_per_group: int = 2
    feedback_fraction: float = 0.0
    qid_count: int = 32
    user_groups: Sequence[str] = USER_GROUPS
    item_groups: Sequence[str] = ITEM_GROUPS

    def validate(self) -> "WorkloadSpec":
        for name in ("recurrence_prob", "feedback_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be a probability")
        if len(self.diurnal_profile) != 24 or any(w <= 0 for w in self.diurnal_profile):
            raise ConfigError("diurnal_profile needs 24 positive weights")
        if self.zipf_exponent < 0:
            raise ConfigError("zipf_exponent must not be negative")
        for name in ("key_universe", "user_count", "item_count", "candidates", "qid_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.duration < 0 or self.base_rate <= 0 or self.day_length <= 0:
            raise ConfigError("duration, base_rate and day_length must be positive")
        return self

    def rate(self, t: float) -> float:
        """
        Arrival rate at trace time t. ``base_rate`` is the mean over a whole day.
        """
        profile = self.diurnal_profile
        hour = int((t % self.day_length) / self.day_length * 24) % 24
        return self.base_rate * profile[hour] / (sum(profile) / len(profile))

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        for key in ("diurnal_profile", "user_groups", "item_groups"):
            doc[key] = list(doc[key])
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "WorkloadSpec":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown workload keys {sorted(unknown)}")
        return cls(**doc).validate()

    @classmethod
    def load(cls, path: str) -> "WorkloadSpec":
        try:
            with open(path, "r", encoding="utf-8") as fd:
                return cls.from_dict(json.load(fd))
        except OSError as e:
            raise ConfigError(f"cannot read workload spec {path}: {e}")
        except ValueError as e:
            raise ConfigError(f"workload spec {path} is not valid JSON: {e}")


@dataclass
class FeedbackEvent:
    user: str
    kind: str
    timestamp: float
    item: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "user": self.user,
            "kind": self.kind,
            "timestamp": self.timestamp,
            "item": self.item,
        }


@dataclass
class TraceRecord:
    timestamp: float
    user: str
    candidates: List[Candidate]
    user_features: Dict[str, List[str]] = field(default_factory=dict)
    qid: str = ""
    feedback: List[FeedbackEvent] = field(default_factory=list)

    def to_request(self, request_id: str = None) -> ScoreRequest:
        return ScoreRequest(
            user=self.user,
            candidates=self.candidates,
            user_features=self.user_features,
            request_id=request_id,
            timestamp=self.timestamp,
            qid=self.qid,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "timestamp": self.timestamp,
            "user": self.user,
            "qid": self.qid,
            "user_features": self.user_features,
            "candidates": [c.to_dict() for c in self.candidates],
            "feedback": [f.to_dict() for f in self.feedback],
        }

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "TraceRecord":
        return cls(
            timestamp=float(doc["timestamp"]),
            user=str(doc["user"]),
            candidates=[Candidate.from_dict(c) for c in doc.get("candidates", [])],
            user_features={g: list(v) for g, v in (doc.get("user_features") or {}).items()},
            qid=str(doc.get("qid") or ""),
            feedback=[FeedbackEvent(**f) for f in doc.get("feedback") or []],
        )


def write_trace(records: Iterable[TraceRecord], path: str) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fd:
        for record in records:
            fd.write(json.dumps(record.to_dict(), separators=(",", ":")))
            fd.write("\n")
            count += 1
    LOG.debug("wrote %d trace records to %s", count, path)
    return count


def read_trace(path: str) -> List[TraceRecord]:
    """
    :raises TraceError: if a line is not a valid record or timestamps decrease
    """
    records = []
    last = -math.inf
    with open(path, "r", encoding="utf-8") as fd:
        for number, line in enumerate(fd, 1):
            if not line.strip():
                continue
            try:
                record = TraceRecord.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError, RankpipeError) as e:
                raise TraceError(path, number, f"invalid record: {e}")
            if record.timestamp < last:
                raise TraceError(path, number, "timestamps must not decrease")
            last = record.timestamp
            records.append(record)
    return records


def zipf_cdf(exponent: float, universe: int) -> np.ndarray:
    """
    CDF over ranks 0 .. universe - 1 of the bounded Zipf law p(r) ~ (r + 1)^-exponent.
    """
    logs = -exponent * np.log(np.arange(1, universe + 1, dtype=np.float64))
    weights = np.exp(logs - logs.max())
    cdf = np.cumsum(weights)
    return cdf / cdf[-1]


def zipf_mass(exponent: float, universe: int, top_fraction: float) -> float:
    """
    Probability mass on the top ``top_fraction`` of ranks.
    """
    top = max(1, int(top_fraction * universe))
    return float(zipf_cdf(exponent, universe)[top - 1])


def sample_ranks(rng: np.random.Generator, cdf: np.ndarray, size: int) -> np.ndarray:
    ranks = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(ranks, len(cdf) - 1)


def calibrate_zipf(
    universe: int, top_fraction: float, mass_fraction: float, tolerance: float = 0.005
) -> float:
    """
    Finds by bisection the Zipf exponent that puts at least ``mass_fraction`` of the
    probability mass on the top ``top_fraction`` of ``universe`` ranks, overshooting by at
    most ``tolerance``.

    :raises Unachievable: if the target needs all of the mass
    """
    if universe < 2 or not 0.0 < top_fraction < 1.0:
        raise ValueError("need universe >= 2 and 0 < top_fraction < 1")
    if mass_fraction >= 1.0:
        raise Unachievable(top_fraction, mass_fraction)
    if mass_fraction <= 0.0:
        raise ValueError("mass_fraction must be positive")

    if zipf_mass(0.0, universe, top_fraction) >= mass_fraction:
        return 0.0

    low, high = 0.0, 1.0
    while zipf_mass(high, universe, top_fraction) < mass_fraction:
        low, high = high, high * 2
        if high > 1e4:
            raise Unachievable(top_fraction, mass_fraction)

    while high - low > 1e-9:
        mid = (low + high) / 2
        mass = zipf_mass(mid, universe, top_fraction)
        if mass >= mass_fraction:
            high = mid
            if mass - mass_fraction <= tolerance / 10:
                break
        else:
            low = mid

    LOG.debug(
        "zipf exponent %.6f puts %.4f of %d ranks' mass on the top %g",
        high,
        zipf_mass(high, universe, top_fraction),
        universe,
        top_fraction,
    )
    return high


def _features(
    rng: np.random.Generator, cdf: np.ndarray, groups: Sequence[str], per_group: int, rows: int
) -> List[Dict[str, List[str]]]:
    ranks = sample_ranks(rng, cdf, rows * len(groups) * per_group).reshape(
        rows, len(groups), per_group
    )
    return [
        {g: [f"k{r}" for r in ranks[row, i]] for i, g in enumerate(groups)} for row in range(rows)
    ]


def generate(spec: WorkloadSpec) -> List[TraceRecord]:
    """
    Generates a trace: arrivals of an inhomogeneous Poisson process (thinning against the
    diurnal peak rate), each request either a recurrence of a request of the last
    ``recurrence_window`` seconds (same user, candidates and features) with probability
    ``recurrence_prob``, or a fresh request with Zipf-drawn features. Deterministic under
    ``spec.seed``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cdf = zipf_cdf(spec.zipf_exponent, spec.key_universe)
    peak = max(spec.rate(h * spec.day_length / 24) for h in range(24))
    candidate_count = min(spec.candidates, spec.item_count)

    records: List[TraceRecord] = []
    recent: Deque[TraceRecord] = collections.deque()
    t = 0.0
    while True:
        t += float(rng.exponential(1.0 / peak))
        if t >= spec.duration:
            break
        if rng.random() * peak > spec.rate(t):
            continue
        timestamp = round(t, 6)

        while recent and recent[0].timestamp <= timestamp - spec.recurrence_window:
            recent.popleft()

        if recent and rng.random() < spec.recurrence_prob:
            source = recent[int(rng.integers(len(recent)))]
            record = TraceRecord(
                timestamp, source.user, source.candidates, source.user_features, source.qid
            )
        else:
            user = f"u{int(rng.integers(spec.user_count))}"
            qid = f"q{int(rng.integers(spec.qid_count))}"
            user_features = _features(rng, cdf, spec.user_groups, spec.features_per_group, 1)[0]
            items = rng.choice(spec.item_count, size=candidate_count, replace=False)
            escores = rng.random(candidate_count)
            item_features = _features(
                rng, cdf, spec.item_groups, spec.features_per_group, candidate_count
            )
            candidates = [
                Candidate(f"i{int(i)}", round(float(e), 6), f)
                for i, e, f in zip(items, escores, item_features)
            ]
            record = TraceRecord(timestamp, user, candidates, user_features, qid)

        if spec.feedback_fraction and rng.random() < spec.feedback_fraction:
            item = record.candidates[int(rng.integers(len(record.candidates)))].item
            delay = round(float(rng.uniform(0.0, 5.0)), 6)
            record.feedback = [FeedbackEvent(record.user, "click", timestamp + delay, item)]

        records.append(record)
        recent.append(record)

    LOG.info("generated %d requests over %gs", len(records), spec.duration)
    return records


def feature_rank(raw_feature: str) -> int:
    return int(raw_feature[1:])


def trace_top_mass(records: Sequence[TraceRecord], universe: int, top_fraction: float) -> float:
    """
    Share of feature occurrences in the trace that fall on the top ``top_fraction`` ranks.
    """
    top = max(1, int(top_fraction * universe))
    hits = total = 0
    for record in records:
        groups = list(record.user_features.values())
        groups.extend(v for c in record.candidates for v in c.features.values())
        for features in groups:
            for feature in features:
                total += 1
                hits += feature_rank(feature) < top
    return hits / total if total else 0.0


def recurrence_fraction(records: Sequence[TraceRecord], window: float) -> float:
    """
    Share of (user, item) pair occurrences whose pair was already requested within the
    preceding ``window`` seconds.
    """
    last_seen: Dict[Tuple[str, str], float] = {}
    repeats = total = 0
    for record in records:
        for candidate in record.candidates:
            pair = (record.user, candidate.item)
            seen = last_seen.get(pair)
            if seen is not None and record.timestamp - seen <= window:
                repeats += 1
            total += 1
            last_seen[pair] = record.timestamp
    return repeats / total if total else 0.0


def load_correlation(
    timestamps: Sequence[float], values: Sequence[float], bucket_seconds: float
) -> float:
    """
    Pearson correlation between the number of requests per time bucket and the mean of
    ``values`` over the bucket's requests. Returns 0 when either side is constant.
    """
    counts: Dict[int, int] = collections.defaultdict(int)
    sums: Dict[int, float] = collections.defaultdict(float)
    for t, v in zip(timestamps, values):
        bucket = int(t // bucket_seconds)
        counts[bucket] += 1
        sums[bucket] += v
    if len(counts) < 2:
        return 0.0
    buckets = sorted(counts)
    traffic = np.array([counts[b] for b in buckets], dtype=np.float64)
    means = np.array([sums[b] / counts[b] for b in buckets])
    if traffic.std() == 0 or means.std() == 0:
        return 0.0
    return float(np.corrcoef(traffic, means)[0, 1])


@dataclass
class ReplayResult:
    requests: int = 0
    completed: int = 0
    failed: int = 0
    wall_seconds: float = 0.0
    latencies: List[float] = field(default_factory=list)
    timestamps: List[float] = field(default_factory=list)
    cutoffs: List[float] = field(default_factory=list)
    served_pairs: int = 0
    shed_pairs: int = 0
    cache_hit_pairs: int = 0
    errors: Dict[str, int] = field(default_factory=dict)
    responses: List[Optional[ScoreResponse]] = field(default_factory=list)
    target_stats: Dict[str, Any] = field(default_factory=dict)

    @property
    def throughput(self) -> float:
        return self.completed / self.wall_seconds if self.wall_seconds > 0 else 0.0

    def summary(self) -> Dict[str, Any]:
        latencies = np.array(self.latencies) * 1000.0
        if len(latencies):
            latency = {
                f"p{int(q * 100)}": float(np.quantile(latencies, q))
                for q in (0.5, 0.9, 0.95, 0.99)
            }
            latency.update(mean=float(latencies.mean()), max=float(latencies.max()))
        else:
            latency = {"p50": 0.0, "p90": 0.0, "p95": 0.0, "p99": 0.0, "mean": 0.0, "max": 0.0}

        bounds = list(LATENCY_BUCKETS_MS) + [math.inf]
        histogram = {f"le_{b:g}": int((latencies <= b).sum()) for b in bounds}

        cutoffs = np.array(self.cutoffs)
        doc = {
            "requests": self.requests,
            "completed": self.completed,
            "failed": self.failed,
            "errors": dict(self.errors),
            "wall_seconds": self.wall_seconds,
            "throughput": self.throughput,
            "latency_ms": latency,
            "latency_histogram": histogram,
            "shed": {
                "mean_cutoff": float(cutoffs.mean()) if len(cutoffs) else 0.0,
                "shed_pairs": self.shed_pairs,
                "cutoff_histogram": np.histogram(cutoffs, bins=10, range=(0.0, 1.0))[0].tolist(),
            },
            "cache": {
                "served_pairs": self.served_pairs,
                "pair_hit_ratio": (
                    self.cache_hit_pairs / self.served_pairs if self.served_pairs else 0.0
                ),
            },
        }
        if self.target_stats:
            cube = self.target_stats.get("cube_cache")
            if cube:
                doc["cache"]["cube_hit_ratio"] = cube["hit_ratio"]
            doc["cache"]["query_hit_ratio"] = {
                m: s["hit_ratio"] for m, s in self.target_stats.get("query_cache", {}).items()
            }
        return doc


def replay(
    records: Sequence[TraceRecord],
    target,
    speed_multiplier: float = 0.0,
    max_inflight: int = 16,
    keep_responses: bool = False,
) -> ReplayResult:
    """
    Issues the trace's requests against a scoring target (anything with ``score``,
    ``feedback`` and ``health``, e.g. a ScoringService or a ServiceClient) at their
    timestamps divided by ``speed_multiplier``, or as fast as possible when it is 0, with
    at most ``max_inflight`` requests outstanding. Feedback events of a record are sent
    once its response arrived.

    :raises PipelineUnavailable: if the target does not report ready
    """
    try:
        health = target.health()
    except Exception as e:
        raise PipelineUnavailable(e)
    if not health.get("ready", False):
        raise PipelineUnavailable(f"target not ready: {health}")

    result = ReplayResult(requests=len(records))
    result.responses = [None] * len(records)
    lock = threading.Lock()
    slots = threading.BoundedSemaphore(max_inflight)

    def issue(index: int, record: TraceRecord) -> None:
        started = time.perf_counter()
        try:
            response = target.score(record.to_request(f"t{index}"))
            for event in record.feedback:
                target.feedback(event.user, event.kind)
        except Exception as e:
            LOG.debug("request t%d failed: %s", index, e)
            with lock:
                result.failed += 1
                name = getattr(e, "type", None) or type(e).__name__
                result.errors[name] = result.errors.get(name, 0) + 1
            return
        finally:
            slots.release()

        elapsed = time.perf_counter() - started
        n = len(response.items) + response.shed_count
        with lock:
            result.completed += 1
            result.latencies.append(elapsed)
            result.timestamps.append(record.timestamp)
            result.cutoffs.append(response.shed_count / n if n else 0.0)
            result.served_pairs += n
            result.shed_pairs += response.shed_count
            result.cache_hit_pairs += response.cache_hits
            if keep_responses:
                result.responses[index] = response

    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, max_inflight), thread_name_prefix="replay") as pool:
        origin = records[0].timestamp if records else 0.0
        for index, record in enumerate(records):
            if speed_multiplier > 0:
                delay = (record.timestamp - origin) / speed_multiplier - (
                    time.perf_counter() - start
                )
                if delay > 0:
                    time.sleep(delay)
            slots.acquire()
            pool.submit(issue, index, record)
    result.wall_seconds = time.perf_counter() - start

    stats = getattr(target, "stats", None)
    if callable(stats):
        try:
            result.target_stats = stats()
        except Exception as e:
            LOG.warning("could not collect target statistics: %s", e)

    LOG.info(
        "replayed %d requests in %.2fs (%d failed, %.1f req/s)",
        result.requests,
        result.wall_seconds,
        result.failed,
        result.throughput,
    )
    return result
