"""
Synchronous batch-at-a-time execution of a compiled pipeline graph, the baseline the
asynchronous engine is compared against.

Requests are grouped into batches. Each batch runs through the stages in topological order;
inside a stage its events are split into operator invocations of ``batch_size`` events that
run on ``parallelism`` threads, and the next stage starts only after every invocation of the
current stage finished. One slow event therefore stalls the whole batch at every stage.
"""
import collections
import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Union

from .events import Event, InferenceRequest, JoinBuffer, ScoredResponse, StageTiming
from .operators import EventFailure, StageContext
from .pipeline import PipelineGraph, StageFailure

LOG = logging.getLogger(__name__)

Outcome = Union[ScoredResponse, Exception]


class LegacyPipeline:
    graph: PipelineGraph
    request_batch: int

    def __init__(self, graph: PipelineGraph, request_batch: Optional[int] = None) -> None:
        """
        :param graph: the compiled graph, shared with (or identical to) the engine's
        :param request_batch: requests per synchronous batch (defaults to the largest
            batch_size x parallelism of any stage)
        """
        self.graph = graph
        self.request_batch = request_batch or max(
            p.batch_size * p.parallelism for p in graph.processors.values()
        )
        self._pools = {
            pid: ThreadPoolExecutor(max_workers=p.parallelism, thread_name_prefix=f"legacy-{pid}")
            for pid, p in graph.processors.items()
        }
        self._tickets = itertools.count(1)

    def close(self) -> None:
        for pool in self._pools.values():
            pool.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()

    def run(self, requests: List[InferenceRequest]) -> List[Outcome]:
        """
        Executes all requests and returns one outcome per request, in input order.
        """
        outcomes: List[Outcome] = []
        for i in range(0, len(requests), self.request_batch):
            outcomes.extend(self._run_batch(requests[i : i + self.request_batch]))
        return outcomes

    def _run_batch(self, requests: List[InferenceRequest]) -> List[Outcome]:
        inbox: Dict[str, List[Event]] = collections.defaultdict(list)
        outcomes: Dict[int, Outcome] = {}
        terminal = JoinBuffer(math.inf)
        tickets = []

        sources = self.graph.sources
        for request in requests:
            ticket = next(self._tickets)
            tickets.append(ticket)
            event = Event(request.request_id, dict(request.payload), ticket, request.tenant)
            if len(sources) == 1:
                inbox[sources[0]].append(event)
            else:
                for i, pid in enumerate(sources):
                    inbox[pid].append(event.fork(i, len(sources)))

        for pid in self.graph.order:
            events = [e for e in inbox.pop(pid, []) if e.ticket not in outcomes]
            if not events:
                continue
            processor = self.graph.processors[pid]
            if processor.joins:
                buffer = JoinBuffer(math.inf)
                events = [m for m in (buffer.offer(e, 0.0) for e in events) if m is not None]

            for event in self._run_stage(pid, events, outcomes):
                try:
                    deliveries = self.graph.route(pid, event)
                except StageFailure as e:
                    outcomes.setdefault(event.ticket, e)
                    continue
                if not deliveries:
                    done = terminal.collapse(event, 0.0)
                    if done is not None:
                        outcomes.setdefault(
                            done.ticket,
                            ScoredResponse(done.request_id, done.payload, done.trace, done.tenant),
                        )
                for target, e in deliveries:
                    inbox[target].append(e)

        result = []
        for request, ticket in zip(requests, tickets):
            outcome = outcomes.get(ticket)
            if outcome is None:
                outcome = StageFailure(request.request_id, "legacy", "request produced no outcome")
            result.append(outcome)
        return result

    def _run_stage(
        self, pid: str, events: List[Event], outcomes: Dict[int, Outcome]
    ) -> List[Event]:
        processor = self.graph.processors[pid]
        context = StageContext(pid, self.graph.default_split_table, self.graph.tenant_entries)
        size = processor.batch_size
        chunks = [events[i : i + size] for i in range(0, len(events), size)]

        def invoke(chunk: List[Event]):
            started = time.monotonic()
            try:
                return chunk, processor.operator.process(chunk, context), started, None
            except Exception as e:
                return chunk, None, started, e

        # barrier: the stage completes only when its slowest invocation does
        completed = list(self._pools[pid].map(invoke, chunks))
        finished = time.monotonic()

        emitted = []
        for chunk, results, started, error in completed:
            if error is not None:
                for event in chunk:
                    outcomes.setdefault(event.ticket, StageFailure(event.request_id, pid, error))
                continue
            for r in results:
                if isinstance(r, EventFailure):
                    outcomes.setdefault(
                        r.event.ticket, StageFailure(r.event.request_id, pid, r.error)
                    )
                    continue
                r.trace = r.trace + [StageTiming(pid, started, started, finished)]
                emitted.append(r)
        return emitted
