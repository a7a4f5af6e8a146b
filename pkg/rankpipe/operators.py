"""
Stage operators: the unit of work of a stage processor, the registry of operator kinds, and
the generic built-in kinds (identity, join, sleep, tenant_dispatch). The serving kinds live
in ``rankpipe.stages`` and register themselves on import.
"""
import importlib
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Type, Union

from . import config
from .costs import CostModel
from .errors import ConfigError, RankpipeError
from .events import Event
from .hashing import unit_interval

LOG = logging.getLogger(__name__)


class NoTenants(RankpipeError):
    def __init__(self) -> None:
        super().__init__("tenant split table is empty")


@dataclass(frozen=True)
class ProcessorSpec:
    id: str
    kind: str
    batch_size: int = 1
    parallelism: int = 1
    channel_capacity: int = config.CHANNEL_CAPACITY
    join_timeout: float = config.JOIN_TIMEOUT
    settings: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_config(cls, doc: Mapping[str, Any]) -> "ProcessorSpec":
        try:
            spec = cls(
                id=str(doc["id"]),
                kind=str(doc["operator"]),
                batch_size=int(doc.get("batch_size", 1)),
                parallelism=int(doc.get("parallelism", 1)),
                channel_capacity=int(doc.get("channel_capacity", config.CHANNEL_CAPACITY)),
                join_timeout=float(doc.get("join_timeout", config.JOIN_TIMEOUT)),
                settings=dict(doc.get("settings") or {}),
            )
        except KeyError as e:
            raise ConfigError(f"processor definition is missing {e}: {dict(doc)}")
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid processor definition {dict(doc)}: {e}")

        if spec.batch_size < 1 or spec.parallelism < 1:
            raise ConfigError(f"processor {spec.id}: batch_size and parallelism must be positive")
        if spec.channel_capacity < spec.batch_size:
            raise ConfigError(f"processor {spec.id}: channel_capacity must be >= batch_size")
        if spec.join_timeout <= 0:
            raise ConfigError(f"processor {spec.id}: join_timeout must be positive")
        return spec


class StageContext:
    """
    What an operator may see of the running pipeline besides its own events.
    """

    stage: str

    def __init__(
        self,
        stage: str,
        split_table: Callable[[], Mapping[str, float]] = None,
        tenant_entries: Mapping[str, str] = None,
        clock: Callable[[], float] = time.monotonic,
    ) -> None:
        self.stage = stage
        self._split_table = split_table or (lambda: {})
        self.tenant_entries = dict(tenant_entries or {})
        self.clock = clock

    def split_table(self) -> Mapping[str, float]:
        return self._split_table()


class EventFailure:
    """
    Marks an event whose processing raised, so that only its request fails.
    """

    def __init__(self, event: Event, error: Exception) -> None:
        self.event = event
        self.error = error


OperatorResult = Union[Event, EventFailure]


class StageOperator:
    """
    Base class of operators. Subclasses either override ``process_event`` (events are
    handled one by one and failures stay per-request) or ``process`` (the batch is handled
    as a whole and an exception fails every event of the batch).
    """

    kind: str = None
    joins: bool = False

    def __init__(self, spec: ProcessorSpec, resources: Any = None, cost_multiplier: float = 1.0):
        self.spec = spec
        self.settings = spec.settings
        self.resources = resources
        self.cost = CostModel.from_settings(spec.settings, spec.batch_size, cost_multiplier)

    def process(self, events: List[Event], context: StageContext) -> List[OperatorResult]:
        results: List[OperatorResult] = []
        for event in events:
            try:
                results.append(self.process_event(event, context))
            except Exception as e:
                results.append(EventFailure(event, e))
        return results

    def process_event(self, event: Event, context: StageContext) -> Event:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __str__(self):
        return f"{self.__class__.__name__}({self.spec.id})"

    def __repr__(self):
        return self.__str__()


_registry: Dict[str, Type[StageOperator]] = {}


def register(kind: str):
    def _decorate(cls: Type[StageOperator]) -> Type[StageOperator]:
        cls.kind = kind
        _registry[kind] = cls
        return cls

    return _decorate


def load_builtin_operators() -> None:
    importlib.import_module("rankpipe.stages")


def registered_kinds() -> List[str]:
    return sorted(_registry)


def operator_class(kind: str) -> Optional[Type[StageOperator]]:
    return _registry.get(kind)


def create_operator(
    spec: ProcessorSpec, resources: Any = None, cost_multiplier: float = 1.0
) -> StageOperator:
    return _registry[spec.kind](spec, resources, cost_multiplier)


@register("identity")
class Identity(StageOperator):
    def process(self, events: List[Event], context: StageContext) -> List[OperatorResult]:
        self.cost.charge(len(events))
        return list(events)


@register("join")
class Join(Identity):
    """
    Recombines the fragments produced by an upstream fan-out. The worker merges fragments
    before the operator sees them, so the operator itself passes merged events through.
    """

    joins = True


@register("sleep")
class Sleep(StageOperator):
    """
    Synthetic service time. A deterministic ``tail_fraction`` of requests (by hash of the
    request id and stage) takes ``tail_multiplier`` times longer.
    """

    def __init__(self, spec: ProcessorSpec, resources: Any = None, cost_multiplier: float = 1.0):
        super().__init__(spec, resources, cost_multiplier)
        self.service_time = float(self.settings.get("service_ms", 1.0)) / 1000
        self.tail_fraction = float(self.settings.get("tail_fraction", 0.0))
        self.tail_multiplier = float(self.settings.get("tail_multiplier", 1.0))

    def duration(self, request_id: str) -> float:
        if unit_interval(f"{request_id}:{self.spec.id}") < self.tail_fraction:
            return self.service_time * self.tail_multiplier
        return self.service_time

    def process_event(self, event: Event, context: StageContext) -> Event:
        time.sleep(self.duration(event.request_id))
        return event


def dispatch_tenant(event: Event, split_table: Mapping[str, float]) -> Event:
    """
    Tags an event with a tenant. An event already carrying a tenant of the table keeps it;
    otherwise the tenant is chosen by a stable hash of the request id placed on the
    cumulative weights, so the same request id always routes to the same tenant.

    :raises NoTenants: if the split table is empty
    """
    if not split_table:
        raise NoTenants()

    if event.tenant is not None and event.tenant in split_table:
        return event

    tenants = sorted(split_table)
    weights = [float(split_table[t]) for t in tenants]
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise ConfigError(f"invalid tenant weights {dict(split_table)}")

    point = unit_interval(event.request_id) * sum(weights)
    cumulative = 0.0
    chosen = [t for t, w in zip(tenants, weights) if w > 0][-1]
    for tenant, weight in zip(tenants, weights):
        cumulative += weight
        if point < cumulative and weight > 0:
            chosen = tenant
            break

    return event.replace(tenant=chosen)


@register("tenant_dispatch")
class TenantDispatch(StageOperator):
    def process_event(self, event: Event, context: StageContext) -> Event:
        tagged = dispatch_tenant(event, context.split_table())
        entry = context.tenant_entries.get(tagged.tenant)
        if entry is None:
            raise ConfigError(f"tenant {tagged.tenant} has no entry processor")
        LOG.debug("dispatching %s to tenant %s (%s)", event, tagged.tenant, entry)
        return tagged.replace(route=entry)
