"""
Simulated per-chunk CPU cost used by the tuning harness, and the allocator cost hook.

Operators charge ``chunk_overhead_us`` once per chunk of ``batch_size`` work units plus
``unit_cost_us`` per unit by spinning the calling thread, so that measured thread CPU time
responds to batching knobs the same way fixed per-invocation overheads do in production.
"""
import logging
import math
import time
from typing import Any, Callable, Dict, Mapping, Optional

LOG = logging.getLogger(__name__)

AllocatorHook = Callable[[Mapping[str, Any]], float]


def passthrough(knobs: Mapping[str, Any]) -> float:
    return 1.0


_allocator_hook: AllocatorHook = passthrough


def set_allocator_hook(hook: Optional[AllocatorHook]) -> AllocatorHook:
    """
    Installs the function mapping allocator knobs (arenas, max active extent, huge page) to a
    multiplier on simulated costs. Passing None restores the no-op passthrough. Returns the
    previously installed hook.
    """
    global _allocator_hook
    previous = _allocator_hook
    _allocator_hook = hook or passthrough
    return previous


def allocator_multiplier(knobs: Optional[Mapping[str, Any]]) -> float:
    if not knobs:
        return 1.0
    multiplier = float(_allocator_hook(knobs))
    if multiplier <= 0:
        LOG.warning("allocator hook returned non-positive multiplier %s, ignoring", multiplier)
        return 1.0
    return multiplier


def spin(seconds: float) -> None:
    if seconds <= 0:
        return
    end = time.perf_counter() + seconds
    while time.perf_counter() < end:
        pass


class CostModel:
    chunk_overhead_us: float
    unit_cost_us: float
    chunk_size: int
    multiplier: float

    def __init__(
        self,
        chunk_overhead_us: float = 0.0,
        unit_cost_us: float = 0.0,
        chunk_size: int = 1,
        multiplier: float = 1.0,
    ) -> None:
        self.chunk_overhead_us = chunk_overhead_us
        self.unit_cost_us = unit_cost_us
        self.chunk_size = max(1, int(chunk_size))
        self.multiplier = multiplier

    @classmethod
    def from_settings(
        cls, settings: Dict[str, Any], chunk_size: int, multiplier: float = 1.0
    ) -> "CostModel":
        return cls(
            chunk_overhead_us=float(settings.get("chunk_overhead_us", 0.0)),
            unit_cost_us=float(settings.get("unit_cost_us", 0.0)),
            chunk_size=chunk_size,
            multiplier=multiplier,
        )

    @property
    def enabled(self) -> bool:
        return self.chunk_overhead_us > 0 or self.unit_cost_us > 0

    def seconds(self, units: int) -> float:
        if units <= 0:
            return 0.0
        chunks = math.ceil(units / self.chunk_size)
        micros = chunks * self.chunk_overhead_us + units * self.unit_cost_us
        return micros * self.multiplier / 1e6

    def charge(self, units: int) -> None:
        if self.enabled:
            spin(self.seconds(units))
