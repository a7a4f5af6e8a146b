"""
Hot reloading: a double buffer that publishes a new generation while readers of the old
one finish, and a watcher that notices new complete generation directories.
"""
import contextlib
import logging
import os
import threading
from typing import Callable, Generic, Iterator, List, Optional, TypeVar

from . import config
from .cube import CubeManifest, is_done

LOG = logging.getLogger(__name__)

T = TypeVar("T")


class _Slot(Generic[T]):
    def __init__(self, value: T) -> None:
        self.value = value
        self.readers = 0
        self.retired = False


class DoubleBuffer(Generic[T]):
    """
    Holds the serving value. Readers lease the current value for the duration of a request;
    ``publish`` swaps in a new value atomically, and the previous value is released through
    ``on_retire`` once its last reader returned its lease.
    """

    def __init__(self, value: T, on_retire: Callable[[T], None] = None) -> None:
        self._current = _Slot(value)
        self._retiring: List[_Slot[T]] = []
        self._cond = threading.Condition()
        self._on_retire = on_retire

    @property
    def current(self) -> T:
        return self._current.value

    def acquire(self) -> "Lease[T]":
        with self._cond:
            slot = self._current
            slot.readers += 1
        return Lease(self, slot)

    @contextlib.contextmanager
    def lease(self) -> Iterator[T]:
        lease = self.acquire()
        try:
            yield lease.value
        finally:
            lease.release()

    def publish(self, value: T) -> T:
        """
        Makes ``value`` the serving value and returns the previous one. The previous value
        is retired immediately if it has no readers, otherwise when the last one leaves.
        """
        with self._cond:
            old = self._current
            self._current = _Slot(value)
            old.retired = True
            if old.readers == 0:
                self._retire(old)
            else:
                self._retiring.append(old)
        return old.value

    def _release(self, slot: "_Slot[T]") -> None:
        with self._cond:
            slot.readers -= 1
            if slot.retired and slot.readers == 0 and slot in self._retiring:
                self._retiring.remove(slot)
                self._retire(slot)
            self._cond.notify_all()

    def _retire(self, slot: "_Slot[T]") -> None:
        if self._on_retire is None:
            return
        try:
            self._on_retire(slot.value)
        except Exception:
            LOG.exception("error while retiring %s", slot.value)

    def wait_retired(self, timeout: float = None) -> bool:
        """
        Blocks until every previously published value has been retired.
        """
        with self._cond:
            return self._cond.wait_for(lambda: not self._retiring, timeout=timeout)

    @property
    def retiring(self) -> int:
        return len(self._retiring)


class Lease(Generic[T]):
    def __init__(self, buffer: DoubleBuffer[T], slot: _Slot[T]) -> None:
        self._buffer = buffer
        self._slot = slot
        self._released = False

    @property
    def value(self) -> T:
        return self._slot.value

    def release(self) -> None:
        if self._released:
            return
        self._released = True
        self._buffer._release(self._slot)


def complete_generations(model_dir_root: str) -> List[int]:
    """
    Lists the generations of all complete generation directories (DONE sentinel present)
    below the root, ascending.
    """
    generations = []
    for name in os.listdir(model_dir_root):
        directory = os.path.join(model_dir_root, name)
        if not os.path.isdir(directory) or not is_done(directory):
            continue
        try:
            generations.append(CubeManifest.read(directory).generation)
        except (OSError, ValueError, KeyError) as e:
            LOG.warning("skipping unreadable generation directory %s: %s", directory, e)
    return sorted(generations)


def generation_directory(model_dir_root: str, generation: int) -> Optional[str]:
    for name in os.listdir(model_dir_root):
        directory = os.path.join(model_dir_root, name)
        if os.path.isdir(directory) and is_done(directory):
            try:
                if CubeManifest.read(directory).generation == generation:
                    return directory
            except (OSError, ValueError, KeyError):
                continue
    return None


def latest_generation(model_dir_root: str) -> Optional[str]:
    """
    Returns the directory of the highest complete generation below the root, if any.
    """
    generations = complete_generations(model_dir_root)
    if not generations:
        return None
    return generation_directory(model_dir_root, generations[-1])


class ModelWatcher:
    """
    Polls a model root for new complete generation directories and calls ``on_trigger``
    with the directory of the highest generation newer than the current one. Several
    generations appearing between two polls produce a single trigger for the highest.
    """

    def __init__(
        self,
        model_dir_root: str,
        on_trigger: Callable[[str], None],
        current_generation: Callable[[], int],
        poll_interval: float = config.POLL_INTERVAL,
    ) -> None:
        if not os.path.isdir(model_dir_root):
            raise FileNotFoundError(model_dir_root)
        self.model_dir_root = model_dir_root
        self.on_trigger = on_trigger
        self.current_generation = current_generation
        self.poll_interval = poll_interval
        self.stopped = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def poll(self) -> Optional[str]:
        try:
            generations = complete_generations(self.model_dir_root)
        except OSError as e:
            LOG.warning("error while scanning %s, retrying later: %s", self.model_dir_root, e)
            return None

        if not generations or generations[-1] <= self.current_generation():
            return None
        return generation_directory(self.model_dir_root, generations[-1])

    def run(self) -> None:
        LOG.info("watching %s for new model generations", self.model_dir_root)
        while not self.stopped.is_set():
            directory = self.poll()
            if directory is not None:
                LOG.info("new model generation ready at %s", directory)
                try:
                    self.on_trigger(directory)
                except Exception:
                    LOG.exception("reload of %s failed", directory)
            self.stopped.wait(self.poll_interval)

    def start(self) -> "ModelWatcher":
        self._thread = threading.Thread(target=self.run, name="model-watcher", daemon=True)
        self._thread.start()
        return self

    def close(self, timeout: float = 2.0) -> None:
        self.stopped.set()
        if self._thread is not None:
            self._thread.join(timeout=timeout)


def watch(
    model_dir_root: str,
    poll_interval: float = config.POLL_INTERVAL,
    current_generation: int = 0,
    stop: threading.Event = None,
) -> Iterator[str]:
    """
    Yields the directory of every new complete generation that is higher than anything
    yielded (or served) before, polling every ``poll_interval`` seconds until ``stop`` is set.
    """
    state = {"generation": current_generation}
    stop = stop or threading.Event()

    watcher = ModelWatcher(
        model_dir_root,
        on_trigger=lambda d: None,
        current_generation=lambda: state["generation"],
        poll_interval=poll_interval,
    )
    while not stop.is_set():
        directory = watcher.poll()
        if directory is not None:
            state["generation"] = CubeManifest.read(directory).generation
            yield directory
        stop.wait(poll_interval)
