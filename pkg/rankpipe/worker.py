import logging
import multiprocessing
import time
from typing import TYPE_CHECKING, Dict, List

from .channel import StopWorker
from .events import Event, StageTiming
from .operators import EventFailure
from .pipeline import DeadlineExceeded, JoinTimeout, StageFailure, StageProcessor

if TYPE_CHECKING:
    from .pipeline import PipelineEngine

LOG = logging.getLogger(__name__)


class StageWorker:
    """
    A StageWorker reads batches of events from the channel of a stage processor, runs the
    processor's operator on them, and hands the results to the engine for routing. A batch
    holds at most ``batch_size`` events and never waits to fill up. Expired events fail
    with DeadlineExceeded before the operator sees them; join processors recombine
    fragments first and time out stale partial joins.
    """

    def __init__(self, processor: StageProcessor, engine: "PipelineEngine") -> None:
        self.processor = processor
        self.engine = engine
        self.stopped = multiprocessing.Event()
        self.context = engine.contexts[processor.id]
        self.join_buffer = engine.join_buffers.get(processor.id)

        metrics = engine.metrics
        self._latency = metrics.summary("stage_latency_seconds", stage=processor.id)
        self._queue_wait = metrics.summary("stage_queue_wait_seconds", stage=processor.id)
        self._depth = metrics.gauge("stage_queue_depth", stage=processor.id)
        self._events = metrics.counter("stage_events_total", stage=processor.id)
        self._cpu = metrics.counter("stage_cpu_seconds_total", stage=processor.id)

    def close(self):
        self.stopped.set()

    def run(self):
        try:
            while not self.stopped.is_set():
                try:
                    batch = self._get_batch()
                    if batch:
                        self._do_batch(batch)
                    self._expire_joins()

                except StopWorker as e:
                    LOG.debug("indicated worker shutdown for stage %s", self.processor.id)
                    if e.batch:
                        self._do_batch(e.batch)
                    return

                except Exception:
                    LOG.exception("exception while processing batch in stage %s", self.processor.id)
        finally:
            LOG.debug(
                "shutting down worker of stage %s, %d events remaining",
                self.processor.id,
                self.processor.channel.qsize(),
            )

    def _get_batch(self) -> List[Event]:
        channel = self.processor.channel
        batch = channel.get_batch(self.processor.batch_size, timeout=self.engine.poll_interval)
        self._depth.set(channel.qsize())
        return batch

    def _expire_joins(self) -> None:
        if self.processor.id in self.engine.graph.sinks:
            self.engine.expire_terminal()
        if self.join_buffer is None or not len(self.join_buffer):
            return
        timeout = self.join_buffer.timeout
        for event in self.join_buffer.expire(self.engine.clock()):
            LOG.warning("join at %s timed out for %s", self.processor.id, event)
            self.engine.fail(event, JoinTimeout(event.request_id, self.processor.id, timeout))

    def _admit(self, batch: List[Event]) -> List[Event]:
        stage = self.processor.id
        now = self.engine.clock()
        live = []
        for event in batch:
            if self.engine.is_done(event.ticket):
                # the request already ended elsewhere (failed fragment), nothing left to do
                continue
            if event.deadline <= now:
                self.engine.fail(event, DeadlineExceeded(event.request_id, stage))
                continue
            live.append(event)

        if self.join_buffer is None:
            return live

        merged = []
        for event in live:
            result = self.join_buffer.offer(event, now)
            if result is not None:
                merged.append(result)
        return merged

    def _do_batch(self, batch: List[Event]) -> None:
        stage = self.processor.id
        events = self._admit(batch)
        if not events:
            return

        LOG.debug("processing batch of size %d in stage %s", len(events), stage)
        consumed: Dict[int, Event] = {event.ticket: event for event in events}

        started = self.engine.clock()
        cpu_started = time.thread_time()
        try:
            results = self.processor.operator.process(events, self.context)
        except Exception as e:
            LOG.debug("operator %s failed on a batch of %d", self.processor.operator, len(events))
            for event in events:
                self.engine.fail(event, StageFailure(event.request_id, stage, e))
            return
        finally:
            self._cpu.inc(max(0.0, time.thread_time() - cpu_started))
        finished = self.engine.clock()

        emitted = []
        accounted = set()
        for result in results:
            if isinstance(result, EventFailure):
                accounted.add(result.event.ticket)
                self.engine.fail(
                    result.event, StageFailure(result.event.request_id, stage, result.error)
                )
                continue

            accounted.add(result.ticket)
            timing = StageTiming(stage, result.enqueued, started, finished)
            result.trace = result.trace + [timing]
            self._latency.observe(timing.latency)
            self._queue_wait.observe(timing.queue_wait)
            emitted.append(result)

        for ticket, event in consumed.items():
            if ticket not in accounted:
                self.engine.fail(event, StageFailure(event.request_id, stage, "event dropped"))

        self._events.inc(len(events))
        self.engine.forward(stage, emitted)
