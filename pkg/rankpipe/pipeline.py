"""
Compiles a declarative pipeline configuration into a DAG of stage processors with shared
channels and runs requests through it asynchronously.

Configuration schema (JSON, ``schema_version`` 1)::

    {
      "schema_version": 1,
      "processors": [
        {"id": "reader", "operator": "data_reader", "batch_size": 8, "parallelism": 2,
         "channel_capacity": 256, "join_timeout": 1.0, "settings": {...}},
        ...
      ],
      "edges": [["reader", "user"], ["reader", "items"], ...],
      "tenants": {"a": {"entry": "dnn_a", "weight": 0.9}, "b": {"entry": "dnn_b", "weight": 0.1}},
      "cache": {...}, "shedding": {...}, "allocator": {...}
    }

A processor with several outbound edges broadcasts every output event to all of them,
tagging each copy as one fragment of the request; a ``join`` processor downstream
recombines the fragments. Fragments that reach the sinks without passing a join are merged the
same way before the request completes. Events routed explicitly (tenant dispatch) go to one
target only.
"""
import collections
import copy
import itertools
import json
import logging
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Tuple

from . import config
from .channel import Channel
from .costs import allocator_multiplier
from .errors import ConfigError, RankpipeError
from .events import Event, InferenceRequest, JoinBuffer, ScoredResponse
from .metrics import Metrics
from .operators import (
    ProcessorSpec,
    StageContext,
    StageOperator,
    create_operator,
    load_builtin_operators,
    operator_class,
)

LOG = logging.getLogger(__name__)

Edge = Tuple[str, str]


class CycleDetected(ConfigError):
    nodes: List[str]

    def __init__(self, nodes: List[str]) -> None:
        self.nodes = nodes
        super().__init__(f"pipeline graph contains a cycle through {nodes}")


class UnknownOperator(ConfigError):
    kind: str

    def __init__(self, kind: str, processor: str) -> None:
        self.kind = kind
        super().__init__(f"processor {processor} uses unknown operator kind {kind}")


class DanglingEdge(ConfigError):
    edge: Edge

    def __init__(self, edge: Edge, missing: str) -> None:
        self.edge = edge
        super().__init__(f"edge {edge[0]} -> {edge[1]} references missing processor {missing}")


class DeadlineExceeded(RankpipeError):
    def __init__(self, request_id: str, stage: Optional[str] = None) -> None:
        self.request_id = request_id
        self.stage = stage
        where = f" at stage {stage}" if stage else " on arrival"
        super().__init__(f"request {request_id} exceeded its deadline{where}")


class StageFailure(RankpipeError):
    def __init__(self, request_id: str, stage: str, cause: Any) -> None:
        self.request_id = request_id
        self.stage = stage
        self.cause = cause
        super().__init__(f"request {request_id} failed at stage {stage}: {cause}")


class JoinTimeout(StageFailure):
    def __init__(self, request_id: str, stage: str, timeout: float) -> None:
        super().__init__(request_id, stage, f"fragments not complete after {timeout:g}s")


class PipelineClosed(RankpipeError):
    def __init__(self, request_id: str) -> None:
        self.request_id = request_id
        super().__init__(f"pipeline closed before request {request_id} completed")


@dataclass(frozen=True)
class Tenant:
    entry: str
    weight: float


class StageProcessor:
    """
    A stage processor: an operator plus the channel queuing its inbound events.
    """

    def __init__(self, spec: ProcessorSpec, operator: StageOperator, channel: Channel) -> None:
        self.spec = spec
        self.operator = operator
        self.channel = channel

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def batch_size(self) -> int:
        return self.spec.batch_size

    @property
    def parallelism(self) -> int:
        return self.spec.parallelism

    @property
    def joins(self) -> bool:
        return self.operator.joins

    def __str__(self):
        return f"StageProcessor({self.id}, {self.spec.kind})"

    def __repr__(self):
        return self.__str__()


class PipelineGraph:
    """
    The compiled, immutable DAG of stage processors.
    """

    def __init__(
        self,
        processors: Dict[str, StageProcessor],
        edges: List[Edge],
        order: List[str],
        tenants: Dict[str, Tenant] = None,
        settings: Dict[str, Any] = None,
    ) -> None:
        self.processors = processors
        self.edges = list(edges)
        self.order = list(order)
        self.tenants = dict(tenants or {})
        self.settings = dict(settings or {})

        self._downstream: Dict[str, List[str]] = collections.defaultdict(list)
        self._upstream: Dict[str, List[str]] = collections.defaultdict(list)
        for source, target in self.edges:
            self._downstream[source].append(target)
            self._upstream[target].append(source)

        self.sources = [p for p in self.order if not self._upstream[p]]
        self.sinks = [p for p in self.order if not self._downstream[p]]

    def downstream(self, processor_id: str) -> List[str]:
        return list(self._downstream[processor_id])

    def upstream(self, processor_id: str) -> List[str]:
        return list(self._upstream[processor_id])

    @property
    def tenant_entries(self) -> Dict[str, str]:
        return {name: tenant.entry for name, tenant in self.tenants.items()}

    def default_split_table(self) -> Dict[str, float]:
        return {name: tenant.weight for name, tenant in self.tenants.items()}

    def route(self, source_id: str, event: Event) -> List[Tuple[str, Event]]:
        """
        Determines where an event emitted by ``source_id`` goes next. Returns an empty list
        for sinks.
        """
        targets = self._downstream[source_id]
        if not targets:
            return []

        if event.route is not None:
            if event.route not in targets:
                raise StageFailure(
                    event.request_id, source_id, f"route {event.route} is not downstream"
                )
            return [(event.route, event.replace(route=None))]

        if len(targets) == 1:
            return [(targets[0], event)]

        total = len(targets)
        return [(target, event.fork(i, total)) for i, target in enumerate(targets)]

    def close(self) -> None:
        for processor in self.processors.values():
            try:
                processor.operator.close()
            except Exception:
                LOG.exception("error while closing operator %s", processor.operator)

    def __str__(self):
        return f"PipelineGraph({' -> '.join(self.order)})"

    def __repr__(self):
        return self.__str__()


def load_pipeline_config(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r") as fd:
            doc = json.load(fd)
    except OSError as e:
        raise ConfigError(f"cannot read pipeline config {path}: {e}")
    except ValueError as e:
        raise ConfigError(f"pipeline config {path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError(f"pipeline config {path} must be a JSON object")
    return doc


def apply_overlay(pipeline_config: Mapping[str, Any], overlay: Mapping[str, Any]) -> Dict[str, Any]:
    """
    Returns a copy of the configuration with the overlay applied. Overlay processors are
    matched by id and their fields (and settings) replace the base fields; other sections
    are merged key by key.
    """
    result = copy.deepcopy(dict(pipeline_config))

    processors = {p["id"]: p for p in result.get("processors", [])}
    for pid, changes in (overlay.get("processors") or {}).items():
        if pid not in processors:
            raise ConfigError(f"overlay references unknown processor {pid}")
        changes = dict(changes)
        settings = changes.pop("settings", None)
        processors[pid].update(changes)
        if settings:
            processors[pid].setdefault("settings", {}).update(settings)

    for section, values in overlay.items():
        if section == "processors":
            continue
        if isinstance(values, Mapping):
            result.setdefault(section, {}).update(values)
        else:
            result[section] = values

    return result


def _topological_order(ids: List[str], edges: List[Edge]) -> List[str]:
    indegree = {pid: 0 for pid in ids}
    downstream = collections.defaultdict(list)
    for source, target in edges:
        downstream[source].append(target)
        indegree[target] += 1

    ready = collections.deque(pid for pid in ids if indegree[pid] == 0)
    order = []
    while ready:
        pid = ready.popleft()
        order.append(pid)
        for target in downstream[pid]:
            indegree[target] -= 1
            if indegree[target] == 0:
                ready.append(target)

    if len(order) != len(ids):
        raise CycleDetected([pid for pid in ids if indegree[pid] > 0])
    return order


def compile(pipeline_config: Mapping[str, Any], resources: Any = None) -> PipelineGraph:
    """
    Validates a pipeline configuration and builds its PipelineGraph: one operator and one
    channel per processor, all inbound edges of a processor delivering into its channel,
    and a topological order recorded for diagnostics.

    :param pipeline_config: the declarative DAG description
    :param resources: passed to every operator (models, caches, shedder of the service)
    :raises CycleDetected: if the edges contain a cycle
    :raises UnknownOperator: if a processor uses an unregistered operator kind
    :raises DanglingEdge: if an edge or tenant references a missing processor
    :raises ConfigError: for any other schema violation
    """
    load_builtin_operators()

    version = pipeline_config.get("schema_version")
    if version != config.PIPELINE_SCHEMA_VERSION:
        raise ConfigError(f"unsupported pipeline schema_version {version}")

    specs: Dict[str, ProcessorSpec] = {}
    for doc in pipeline_config.get("processors") or []:
        spec = ProcessorSpec.from_config(doc)
        if spec.id in specs:
            raise ConfigError(f"duplicate processor id {spec.id}")
        if operator_class(spec.kind) is None:
            raise UnknownOperator(spec.kind, spec.id)
        specs[spec.id] = spec

    if not specs:
        raise ConfigError("pipeline has no processors")

    edges: List[Edge] = []
    for edge in pipeline_config.get("edges") or []:
        if len(edge) != 2:
            raise ConfigError(f"edge must be a [source, target] pair: {edge}")
        source, target = str(edge[0]), str(edge[1])
        for pid in (source, target):
            if pid not in specs:
                raise DanglingEdge((source, target), pid)
        if (source, target) in edges:
            raise ConfigError(f"duplicate edge {source} -> {target}")
        edges.append((source, target))

    order = _topological_order(list(specs), edges)

    tenants: Dict[str, Tenant] = {}
    for name, doc in (pipeline_config.get("tenants") or {}).items():
        entry = str(doc.get("entry", ""))
        if entry not in specs:
            raise DanglingEdge(("tenant:" + name, entry), entry)
        weight = float(doc.get("weight", 1.0))
        if weight < 0:
            raise ConfigError(f"tenant {name} has negative weight")
        tenants[name] = Tenant(entry, weight)
    if tenants and sum(t.weight for t in tenants.values()) <= 0:
        raise ConfigError("tenant weights must sum to a positive value")

    multiplier = allocator_multiplier(pipeline_config.get("allocator"))

    processors = {}
    for pid in order:
        spec = specs[pid]
        operator = create_operator(spec, resources, multiplier)
        processors[pid] = StageProcessor(spec, operator, Channel(pid, spec.channel_capacity))

    settings = {
        k: v
        for k, v in pipeline_config.items()
        if k not in ("processors", "edges", "tenants", "schema_version")
    }
    graph = PipelineGraph(processors, edges, order, tenants, settings)
    LOG.debug("compiled %s", graph)
    return graph


class PipelineEngine:
    """
    Runs requests through a compiled PipelineGraph. Every stage processor gets
    ``parallelism`` worker threads consuming its channel; requests are submitted from any
    thread and complete through futures. Each submitted request ends in exactly one
    outcome: a ScoredResponse or an exception.
    """

    poll_interval: float = 0.05

    def __init__(self, graph: PipelineGraph, metrics: Metrics = None) -> None:
        self.graph = graph
        self.metrics = metrics or Metrics()
        self.clock = time.monotonic

        self._split_table: Dict[str, float] = graph.default_split_table()
        self._inflight: Dict[int, Tuple[str, Future]] = {}
        self._lock = threading.Lock()
        self._tickets = itertools.count(1)
        self._workers = []
        self._threads: List[threading.Thread] = []
        self.started = False

        self.join_buffers: Dict[str, JoinBuffer] = {
            pid: JoinBuffer(p.spec.join_timeout) for pid, p in graph.processors.items() if p.joins
        }
        # fragments of a request that reach the sinks separately are recombined here
        self.terminal = JoinBuffer(
            max(graph.processors[pid].spec.join_timeout for pid in graph.sinks)
        )
        self.contexts: Dict[str, StageContext] = {
            pid: StageContext(pid, self.split_table, graph.tenant_entries, self.clock)
            for pid in graph.processors
        }

    def start(self) -> "PipelineEngine":
        from .worker import StageWorker

        if self.started:
            return self
        self.started = True
        for pid in self.graph.order:
            processor = self.graph.processors[pid]
            for i in range(processor.parallelism):
                worker = StageWorker(processor, self)
                thread = threading.Thread(
                    target=worker.run, name=f"stage-{pid}-{i}", daemon=True
                )
                self._workers.append(worker)
                self._threads.append(thread)
                thread.start()
        LOG.info("started pipeline %s with %d workers", self.graph, len(self._threads))
        return self

    def close(self, timeout: float = 2.0) -> None:
        if not self.started:
            return
        for worker in self._workers:
            worker.close()
        for pid in self.graph.order:
            processor = self.graph.processors[pid]
            processor.channel.stop(processor.parallelism)
        for thread in self._threads:
            thread.join(timeout=timeout)

        with self._lock:
            remaining = list(self._inflight.items())
            self._inflight.clear()
        for ticket, (request_id, future) in remaining:
            self._resolve(future, error=PipelineClosed(request_id))
        self.started = False
        LOG.info("closed pipeline %s, %d requests aborted", self.graph, len(remaining))

    def __enter__(self):
        return self.start()

    def __exit__(self, *args):
        self.close()

    def split_table(self) -> Dict[str, float]:
        return self._split_table

    def set_split_table(self, split_table: Mapping[str, float]) -> None:
        """
        Swaps the tenant split table. Topology stays fixed, so every tenant must already
        have an entry processor.
        """
        for tenant, weight in split_table.items():
            if tenant not in self.graph.tenants:
                raise ConfigError(f"tenant {tenant} has no branch in the pipeline")
            if weight < 0:
                raise ConfigError(f"tenant {tenant} has negative weight")
        self._split_table = dict(split_table)
        LOG.info("swapped tenant split table to %s", self._split_table)

    def submit(self, request: InferenceRequest) -> Future:
        future = Future()
        future.set_running_or_notify_cancel()
        now = self.clock()

        if request.deadline is not None:
            deadline = request.deadline
        elif request.timeout is not None:
            deadline = now + request.timeout
        else:
            deadline = now + config.REQUEST_DEADLINE

        if deadline <= now:
            self.metrics.counter("requests_total", outcome="error").inc()
            future.set_exception(DeadlineExceeded(request.request_id))
            return future

        ticket = next(self._tickets)
        with self._lock:
            self._inflight[ticket] = (request.request_id, future)

        event = Event(
            request_id=request.request_id,
            payload=dict(request.payload),
            ticket=ticket,
            tenant=request.tenant,
            deadline=deadline,
        )

        sources = self.graph.sources
        if len(sources) == 1:
            deliveries = [(sources[0], event)]
        else:
            deliveries = [(pid, event.fork(i, len(sources))) for i, pid in enumerate(sources)]

        for pid, e in deliveries:
            self.graph.processors[pid].channel.put(e)
        return future

    def execute(self, request: InferenceRequest, timeout: float = None) -> ScoredResponse:
        return self.submit(request).result(timeout=timeout)

    def is_done(self, ticket: int) -> bool:
        return ticket not in self._inflight

    def pending(self) -> int:
        return len(self._inflight)

    def forward(self, source_id: str, events: List[Event]) -> None:
        for event in events:
            try:
                deliveries = self.graph.route(source_id, event)
            except StageFailure as e:
                self.fail(event, e)
                continue

            if not deliveries:
                self.complete(event)
                continue

            for target, e in deliveries:
                self.graph.processors[target].channel.put(e)

    def complete(self, event: Event) -> None:
        """
        Takes a terminal event. A request resolves only after every fragment it was split
        into has reached a sink; their payloads are merged like a join would merge them.
        """
        if event.fragments:
            if self.is_done(event.ticket):
                return
            event = self.terminal.collapse(event, self.clock())
            if event is None:
                return

        with self._lock:
            entry = self._inflight.pop(event.ticket, None)
        if entry is None:
            LOG.warning("terminal event for %s arrived after its request ended", event)
            return
        response = ScoredResponse(event.request_id, event.payload, event.trace, event.tenant)
        self.metrics.counter("requests_total", outcome="ok").inc()
        self._resolve(entry[1], result=response)

    def expire_terminal(self) -> None:
        if not len(self.terminal):
            return
        for event in self.terminal.expire(self.clock()):
            LOG.warning("fragments of %s did not all reach a sink", event)
            sink = event.trace[-1].stage if event.trace else "terminal"
            self.fail(event, JoinTimeout(event.request_id, sink, self.terminal.timeout))

    def fail(self, event: Event, error: Exception) -> None:
        with self._lock:
            entry = self._inflight.pop(event.ticket, None)
        if entry is None:
            return
        for buffer in [*self.join_buffers.values(), self.terminal]:
            buffer.discard(event.ticket)
        LOG.debug("request %s failed: %s", event.request_id, error)
        self.metrics.counter("requests_total", outcome="error").inc()
        self._resolve(entry[1], error=error)

    @staticmethod
    def _resolve(future: Future, result: Any = None, error: Exception = None) -> None:
        if future.done():
            return
        if error is not None:
            future.set_exception(error)
        else:
            future.set_result(result)
