"""
Events flowing between stage processors, join bookkeeping, and the request/response
envelopes of the pipeline engine.
"""
import dataclasses
import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

LOG = logging.getLogger(__name__)

Fragment = Tuple[int, int]
Payload = Dict[str, Any]


@dataclass
class StageTiming:
    stage: str
    enqueued: float
    started: float
    finished: float

    @property
    def queue_wait(self) -> float:
        return self.started - self.enqueued

    @property
    def service_time(self) -> float:
        return self.finished - self.started

    @property
    def latency(self) -> float:
        return self.finished - self.enqueued

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "enqueued": self.enqueued,
            "started": self.started,
            "finished": self.finished,
        }


@dataclass
class Event:
    """
    A unit of work travelling through the pipeline. ``fragments`` is a stack of
    (index, total) frames pushed by fan-out and popped by joins; ``ticket`` identifies the
    submission inside one engine while ``request_id`` is the caller's identifier.
    """

    request_id: str
    payload: Payload
    ticket: int = 0
    tenant: Optional[str] = None
    deadline: float = math.inf
    fragments: Tuple[Fragment, ...] = ()
    trace: List[StageTiming] = field(default_factory=list)
    route: Optional[str] = None
    enqueued: float = 0.0

    @property
    def fragment_index(self) -> int:
        return self.fragments[-1][0] if self.fragments else 0

    @property
    def fragment_total(self) -> int:
        return self.fragments[-1][1] if self.fragments else 1

    def fork(self, index: int, total: int) -> "Event":
        if not 0 <= index < total:
            raise ValueError(f"fragment index {index} out of range for total {total}")
        return dataclasses.replace(
            self,
            payload=dict(self.payload),
            fragments=self.fragments + ((index, total),),
            trace=list(self.trace),
            route=None,
        )

    def replace(self, **changes) -> "Event":
        return dataclasses.replace(self, **changes)

    @property
    def join_key(self) -> Tuple[int, Tuple[Fragment, ...]]:
        return self.ticket, self.fragments[:-1]

    def __str__(self):
        return f"Event({self.request_id}, fragments={self.fragments})"


def _merge_into(target: Payload, source: Payload) -> None:
    for key, value in source.items():
        if key not in target:
            target[key] = value
        elif isinstance(target[key], dict) and isinstance(value, dict):
            nested = dict(target[key])
            _merge_into(nested, value)
            target[key] = nested
        # scalar conflicts: the lower fragment index already won


def merge_payloads(fragments: List[Event]) -> Payload:
    """
    Merges fragment payloads independently of arrival order: fragments are folded by
    ascending fragment index, nested dicts are merged key by key, and on conflicting scalar
    values the lowest fragment index wins.
    """
    merged: Payload = {}
    for event in sorted(fragments, key=lambda e: e.fragment_index):
        _merge_into(merged, event.payload)
    return merged


def merge_traces(fragments: List[Event]) -> List[StageTiming]:
    seen = set()
    trace = []
    for event in sorted(fragments, key=lambda e: e.fragment_index):
        for timing in event.trace:
            if id(timing) not in seen:
                seen.add(id(timing))
                trace.append(timing)
    trace.sort(key=lambda t: (t.started, t.stage))
    return trace


class _Partial:
    def __init__(self, total: int, first_seen: float) -> None:
        self.total = total
        self.first_seen = first_seen
        self.parts: Dict[int, Event] = {}


class JoinBuffer:
    """
    Accumulates the fragments of each request until all ``fragment_total`` of them have
    arrived. State for a request is dropped as soon as its join fires or its fragments go
    stale.
    """

    timeout: float

    def __init__(self, timeout: float) -> None:
        self.timeout = timeout
        self._pending: Dict[Tuple[int, Tuple[Fragment, ...]], _Partial] = {}
        self._lock = threading.Lock()

    def offer(self, event: Event, now: float) -> Optional[Event]:
        """
        Adds a fragment. Returns the merged event once the last fragment arrived, otherwise
        None. Events without a fragment frame pass through unchanged.
        """
        if not event.fragments:
            return event

        key = event.join_key
        with self._lock:
            partial = self._pending.get(key)
            if partial is None:
                partial = self._pending[key] = _Partial(event.fragment_total, now)
            if event.fragment_index in partial.parts:
                LOG.warning("duplicate fragment %d for %s", event.fragment_index, event)
            partial.parts[event.fragment_index] = event
            if len(partial.parts) < partial.total:
                return None
            del self._pending[key]

        parts = sorted(partial.parts.values(), key=lambda e: e.fragment_index)
        first = parts[0]
        tenant = next((e.tenant for e in parts if e.tenant), None)
        return first.replace(
            payload=merge_payloads(parts),
            fragments=first.fragments[:-1],
            trace=merge_traces(parts),
            deadline=min(e.deadline for e in parts),
            tenant=tenant,
            route=None,
        )

    def expire(self, now: float) -> List[Event]:
        """
        Discards partial joins older than the timeout and returns one fragment of each, so
        the caller can fail the corresponding requests.
        """
        expired = []
        with self._lock:
            for key, partial in list(self._pending.items()):
                if now - partial.first_seen >= self.timeout:
                    del self._pending[key]
                    expired.append(next(iter(partial.parts.values())))
        return expired

    def discard(self, ticket: int) -> None:
        with self._lock:
            for key in [k for k in self._pending if k[0] == ticket]:
                del self._pending[key]

    def __len__(self):
        return len(self._pending)

    def collapse(self, event: Event, now: float) -> Optional[Event]:
        """
        Offers a fragment and keeps merging outward through nested fan-out frames. Returns
        the fully recombined event (no frames left) once every fragment of the request has
        arrived, otherwise None.
        """
        while event.fragments:
            merged = self.offer(event, now)
            if merged is None:
                return None
            event = merged
        return event


@dataclass
class InferenceRequest:
    """
    A request submitted to the pipeline engine. ``timeout`` is relative to submission;
    ``deadline`` (absolute, engine clock) takes precedence when given.
    """

    request_id: str
    payload: Payload
    tenant: Optional[str] = None
    timeout: Optional[float] = None
    deadline: Optional[float] = None


@dataclass
class ScoredResponse:
    request_id: str
    payload: Payload
    trace: List[StageTiming]
    tenant: Optional[str] = None

    @property
    def scores(self) -> Dict[str, Any]:
        return self.payload.get("scores", {})

    @property
    def shed(self) -> List[str]:
        return self.payload.get("shed", [])

    @property
    def stage_latencies(self) -> Dict[str, float]:
        return {t.stage: t.latency for t in self.trace}
