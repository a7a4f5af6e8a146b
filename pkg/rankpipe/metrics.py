"""
Service metrics on a per-instance ``prometheus_client`` registry, exposed in the Prometheus
text format on ``/v1/metrics``.

Latency and fraction distributions are exported as Prometheus summaries or histograms and
additionally keep a bounded reservoir of recent observations, from which the service and
the overload detector read quantiles in-process.
"""
import collections
import threading
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from prometheus_client import (
    CONTENT_TYPE_LATEST,
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    Summary,
    generate_latest,
)

QUANTILES = (0.5, 0.9, 0.95, 0.99)

HELP = {
    "requests_total": "Requests that left the pipeline, by outcome",
    "served_pairs_total": "User-item pairs returned to callers",
    "request_latency_seconds": "End-to-end request latency",
    "stage_latency_seconds": "Time from enqueue to completion per stage",
    "stage_queue_wait_seconds": "Time an event waited in a stage channel",
    "stage_queue_depth": "Events waiting in a stage channel",
    "stage_queue_high_water": "Largest channel depth seen per stage",
    "stage_events_total": "Events processed per stage",
    "stage_cpu_seconds_total": "Thread CPU time spent per stage",
    "cube_cache_hits_total": "Cube cache hits by level",
    "cube_cache_misses_total": "Cube lookups served from the snapshot",
    "cube_cache_hit_ratio": "Cube cache hit ratio since start",
    "query_cache_hits_total": "Query cache hits per model",
    "query_cache_misses_total": "Query cache misses per model",
    "query_cache_hit_ratio": "Query cache hit ratio per model",
    "scored_pairs_total": "Pairs forwarded through a dense model",
    "reused_pairs_total": "Pairs answered from the query cache",
    "cutoff_fraction": "Fraction of candidates cut by the load shedder",
    "shed_candidates_total": "Candidates cut by the load shedder",
    "overloaded_requests_total": "Requests seen while the pipeline was overloaded",
    "feedback_total": "Feedback events by kind",
    "model_generation": "Serving model generation",
    "inflight_requests": "Requests admitted and not yet completed",
}

LabelSet = Tuple[str, ...]


class Distribution:
    """
    One labelled Prometheus summary or histogram plus a reservoir of the most recent
    observations for quantiles.
    """

    def __init__(self, child, reservoir: int = 10_000) -> None:
        self._child = child
        self._values: Deque[float] = collections.deque(maxlen=reservoir)
        self._lock = threading.Lock()
        self.count = 0
        self.total = 0.0

    def observe(self, value: float) -> None:
        self._child.observe(value)
        with self._lock:
            self._values.append(value)
            self.count += 1
            self.total += value

    def quantiles(self, qs: Iterable[float] = QUANTILES) -> Dict[float, float]:
        with self._lock:
            values = np.fromiter(self._values, dtype=float, count=len(self._values))
        if not len(values):
            return {q: 0.0 for q in qs}
        return {q: float(np.quantile(values, q)) for q in qs}

    def values(self) -> List[float]:
        with self._lock:
            return list(self._values)


class Metrics:
    """
    Lazily creates metric families on a private registry. The label names of a family are
    fixed by its first use.
    """

    namespace: str = "rankpipe"
    content_type: str = CONTENT_TYPE_LATEST

    def __init__(self) -> None:
        self.registry = CollectorRegistry()
        self._families: Dict[str, Tuple[type, LabelSet, object]] = {}
        self._distributions: Dict[Tuple[str, Tuple[Tuple[str, str], ...]], Distribution] = {}
        self._lock = threading.RLock()

    @property
    def prefix(self) -> str:
        return self.namespace + "_"

    def _family(self, kind: type, name: str, labelnames: LabelSet, **kwargs):
        with self._lock:
            entry = self._families.get(name)
            if entry is None:
                family = kind(
                    name,
                    HELP.get(name, name.replace("_", " ")),
                    labelnames=labelnames,
                    namespace=self.namespace,
                    registry=self.registry,
                    **kwargs,
                )
                entry = self._families[name] = (kind, labelnames, family)
        registered, known, family = entry
        if registered is not kind:
            raise ValueError(f"metric {name} is a {registered.__name__}, not a {kind.__name__}")
        if known != labelnames:
            raise ValueError(f"metric {name} has labels {known}, got {labelnames}")
        return family

    def _child(self, kind: type, name: str, labels: Dict[str, object], **kwargs):
        labelnames = tuple(sorted(labels))
        family = self._family(kind, name, labelnames, **kwargs)
        if not labelnames:
            return family
        return family.labels(**{k: str(v) for k, v in labels.items()})

    def counter(self, name: str, **labels) -> Counter:
        return self._child(Counter, name, labels)

    def gauge(self, name: str, **labels) -> Gauge:
        return self._child(Gauge, name, labels)

    def summary(self, name: str, **labels) -> Distribution:
        return self._distribution(Summary, name, labels)

    def histogram(
        self, name: str, buckets: Optional[Sequence[float]] = None, **labels
    ) -> Distribution:
        """
        A histogram-backed distribution; ``buckets`` only matter on the family's first use.
        """
        kwargs = {"buckets": tuple(buckets)} if buckets is not None else {}
        return self._distribution(Histogram, name, labels, **kwargs)

    def _distribution(self, kind: type, name: str, labels: Dict[str, object], **kwargs):
        key = (name, tuple(sorted((k, str(v)) for k, v in labels.items())))
        with self._lock:
            distribution = self._distributions.get(key)
            if distribution is None:
                registered = self._families.get(name)
                if registered is not None and registered[0] in (Summary, Histogram):
                    kind = registered[0]
                distribution = Distribution(self._child(kind, name, labels, **kwargs))
                self._distributions[key] = distribution
        return distribution

    def value(self, name: str, **labels) -> float:
        """
        The current value of a counter or gauge sample, 0 if it was never touched.
        """
        sample = self.registry.get_sample_value(
            self.prefix + name, {k: str(v) for k, v in labels.items()}
        )
        return sample if sample is not None else 0.0

    def render(self) -> str:
        return generate_latest(self.registry).decode("utf-8")
