import logging
import time
from queue import Empty, Full, Queue
from typing import Any, List, Optional

LOG = logging.getLogger(__name__)


class StopWorker(Exception):
    """
    An exception that indicates to stop a StageWorker. Carries whatever was read from the
    channel before the stop marker, so the worker can flush it.
    """

    marker = "__STOP__"

    batch: Optional[List[Any]]

    def __init__(self, batch: List[Any] = None):
        self.batch = batch


class Channel:
    """
    Bounded FIFO of pending events of one stage processor. All inbound edges of the processor
    deliver into the same channel. Producers block while the channel is full (backpressure);
    nothing is ever dropped.
    """

    name: str
    capacity: int

    def __init__(self, name: str, capacity: int) -> None:
        if capacity < 1:
            raise ValueError("channel capacity must be positive")
        self.name = name
        self.capacity = capacity
        self._queue = Queue(maxsize=capacity)
        self.high_water = 0

    def put(self, event, timeout: float = None) -> None:
        """
        Enqueues an event, blocking while the channel is full.

        :raises queue.Full: if a timeout was given and the channel stayed full
        """
        event.enqueued = time.monotonic()
        self._queue.put(event, timeout=timeout)
        depth = self._queue.qsize()
        if depth > self.high_water:
            self.high_water = depth

    def stop(self, consumers: int = 1) -> None:
        for _ in range(consumers):
            try:
                self._queue.put_nowait(StopWorker.marker)
            except Full:
                # consumers also poll their stop flag, the marker only speeds up shutdown
                LOG.debug("channel %s full, not enqueuing stop marker", self.name)
                return

    def get_batch(self, n: int, timeout: float = None) -> List[Any]:
        """
        Reads up to n events. Blocks until at least one event is available, then takes
        whatever else is already queued without waiting for the batch to fill.

        :param n: the maximum number of events to return
        :param timeout: how long to wait for the first event
        :return: the events, possibly empty if the timeout passed
        :raises StopWorker: if the stop marker was retrieved from the channel
        """
        q = self._queue
        try:
            item = q.get(timeout=timeout)
        except Empty:
            return []

        if item == StopWorker.marker:
            raise StopWorker()

        result = [item]

        try:
            while len(result) < n:
                item = q.get(block=False)

                if item == StopWorker.marker:
                    raise StopWorker(result)

                result.append(item)
        except Empty:
            pass

        return result

    def qsize(self) -> int:
        return self._queue.qsize()

    def __str__(self):
        return f"Channel({self.name}, {self.qsize()}/{self.capacity})"

    def __repr__(self):
        return self.__str__()
