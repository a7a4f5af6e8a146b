"""
Operator kinds of the scoring pipeline. A request travels as one event whose payload
accumulates, stage by stage:

- ``request``, ``lease``, ``generation`` (data_reader)
- ``user_signatures`` (user_processor)
- ``candidates`` sorted by recall score (item_extractor), ``item_signatures``
  (item_processor)
- ``candidates`` cut to the kept prefix, ``shed``, ``cutoff``, ``overload`` (load_shedder)
- ``params`` (cube_accessor)
- ``scores`` and ``cache_hits`` per model (model_inference)
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cache import CubeCache, GenerationMismatch, QueryCache
from .cube import SparseParameter, sign
from .errors import ConfigError, RankpipeError
from .events import Event
from .metrics import Metrics
from .models import ModelGeneration, ModelStore
from .operators import EventFailure, OperatorResult, StageContext, StageOperator, register
from .schema import Candidate, MalformedRequest, ScoreRequest
from .scorer import UnknownGroup, assemble, forward
from .shedding import OverloadDetector, PruningModel, SheddingFeatures, shed, sort_candidates

LOG = logging.getLogger(__name__)

CUTOFF_BUCKETS = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)

DEFAULT_BATCH_SIZES = {
    "reader": 8,
    "user": 30,
    "item_extractor": 4,
    "item_processor": 6,
    "recombine": 32,
    "shedder": 8,
    "cube": 10,
    "dnn": 15,
    "merge": 32,
}


class NoModelLease(RankpipeError):
    def __init__(self, request_id: str) -> None:
        self.request_id = request_id
        super().__init__(f"request {request_id} entered the pipeline without a model lease")


@dataclass
class ServingResources:
    """
    Shared state handed to every serving operator.
    """

    store: ModelStore
    cube_cache: Optional[CubeCache] = None
    query_caches: Dict[str, QueryCache] = field(default_factory=dict)
    detector: Optional[OverloadDetector] = None
    pruner: Optional[PruningModel] = None
    slate_size: int = 10
    force_overload: bool = False
    metrics: Metrics = field(default_factory=Metrics)


def sign_groups(groups: Mapping[str, Sequence[str]]) -> Dict[str, List[int]]:
    return {group: [sign(f) for f in features] for group, features in groups.items()}


def request_time(request: ScoreRequest, context: StageContext) -> float:
    """
    Requests replayed from a trace carry their own timestamp; live ones use the engine clock.
    """
    return request.timestamp if request.timestamp is not None else context.clock()


def _generation(event: Event) -> ModelGeneration:
    return event.payload["lease"].value


def _by_generation(events: List[Event]) -> Dict[int, Tuple[ModelGeneration, List[Event]]]:
    groups: Dict[int, Tuple[ModelGeneration, List[Event]]] = {}
    for event in events:
        generation = _generation(event)
        groups.setdefault(generation.generation, (generation, []))[1].append(event)
    return groups


def _signatures(payload: Mapping[str, Any]) -> List[int]:
    signatures = []
    for values in payload.get("user_signatures", {}).values():
        signatures.extend(values)
    item_signatures = payload.get("item_signatures", {})
    for candidate in payload.get("candidates", ()):
        for values in item_signatures.get(candidate.item, {}).values():
            signatures.extend(values)
    return signatures


class ServingOperator(StageOperator):
    """
    Charges the simulated cost of a batch, counted in ``units``, then processes its events
    one by one.
    """

    resources: ServingResources

    def units(self, events: List[Event]) -> int:
        return len(events)

    def process(self, events: List[Event], context: StageContext) -> List[OperatorResult]:
        self.cost.charge(self.units(events))
        return super().process(events, context)


@register("data_reader")
class DataReader(ServingOperator):
    def process_event(self, event: Event, context: StageContext) -> Event:
        request = event.payload.get("request")
        if isinstance(request, Mapping):
            request = ScoreRequest.from_dict(request)
        if not isinstance(request, ScoreRequest):
            raise MalformedRequest("event carries no score request")

        lease = event.payload.get("lease")
        if lease is None:
            raise NoModelLease(event.request_id)

        payload = dict(event.payload, request=request, generation=lease.value.generation)
        return event.replace(payload=payload)


@register("user_processor")
class UserProcessor(ServingOperator):
    def process_event(self, event: Event, context: StageContext) -> Event:
        request: ScoreRequest = event.payload["request"]
        payload = dict(event.payload, user_signatures=sign_groups(request.user_features))
        return event.replace(payload=payload)


@register("item_extractor")
class ItemExtractor(ServingOperator):
    def units(self, events: List[Event]) -> int:
        return sum(len(e.payload["request"].candidates) for e in events)

    def process_event(self, event: Event, context: StageContext) -> Event:
        request: ScoreRequest = event.payload["request"]
        payload = dict(event.payload, candidates=sort_candidates(request.candidates))
        return event.replace(payload=payload)


@register("item_processor")
class ItemProcessor(ServingOperator):
    def units(self, events: List[Event]) -> int:
        return sum(len(e.payload["candidates"]) for e in events)

    def process_event(self, event: Event, context: StageContext) -> Event:
        candidates: List[Candidate] = event.payload["candidates"]
        item_signatures = {c.item: sign_groups(c.features) for c in candidates}
        return event.replace(payload=dict(event.payload, item_signatures=item_signatures))


@register("load_shedder")
class LoadShedder(ServingOperator):
    """
    Cuts the tail of the sorted candidate list while the pipeline is overloaded. Settings:
    ``slate_size`` (N), ``watch_stage`` (the re-ranking stage whose p95 queue wait feeds the
    overload detector).
    """

    def __init__(self, spec, resources: ServingResources = None, cost_multiplier: float = 1.0):
        super().__init__(spec, resources, cost_multiplier)
        if resources is None:
            raise ConfigError(f"processor {spec.id} needs serving resources")
        self.slate_size = int(self.settings.get("slate_size", resources.slate_size))
        self.watch_stage = self.settings.get("watch_stage")

        metrics = resources.metrics
        self._cutoff = metrics.histogram("cutoff_fraction", CUTOFF_BUCKETS)
        self._shed = metrics.counter("shed_candidates_total")
        self._overloaded = metrics.counter("overloaded_requests_total")

    def process(self, events: List[Event], context: StageContext) -> List[OperatorResult]:
        detector = self.resources.detector
        if detector is not None and self.watch_stage:
            metrics = self.resources.metrics
            wait = metrics.summary("stage_queue_wait_seconds", stage=self.watch_stage)
            detector.observe_queue_wait(wait.quantiles((0.95,))[0.95])
        return super().process(events, context)

    def process_event(self, event: Event, context: StageContext) -> Event:
        request: ScoreRequest = event.payload["request"]
        candidates: List[Candidate] = event.payload["candidates"]
        resources = self.resources
        detector = resources.detector
        now = request_time(request, context)

        overload = resources.force_overload
        quota, previous = 1.0, 0.0
        if detector is not None:
            detector.observe(now)
            quota = detector.quota(now)
            previous = detector.cutoff_ratio_prev
            overload = overload or detector.overloaded(now)

        kept = candidates
        if overload and resources.pruner is not None:
            features = SheddingFeatures.from_scores(
                quota, previous, request.qid, [c.escore for c in candidates]
            )
            kept = shed(resources.pruner, features, candidates, self.slate_size, True)

        n = len(candidates)
        cutoff = 1.0 - len(kept) / n if n else 0.0
        if detector is not None:
            detector.cutoff_ratio_prev = cutoff

        self._cutoff.observe(cutoff)
        self._shed.inc(n - len(kept))
        if overload:
            self._overloaded.inc()

        payload = dict(
            event.payload,
            candidates=list(kept),
            shed=[c.item for c in candidates[len(kept) :]],
            cutoff=cutoff,
            overload=overload,
        )
        return event.replace(payload=payload)


@register("cube_accessor")
class CubeAccessor(ServingOperator):
    """
    Fetches the sparse parameters of every feature signature of a batch with one lookup per
    model generation present in the batch, through the cube cache when it serves that
    generation.
    """

    def process(self, events: List[Event], context: StageContext) -> List[OperatorResult]:
        results: List[OperatorResult] = []
        for generation, group in _by_generation(events).values():
            signatures = []
            for event in group:
                signatures.extend(_signatures(event.payload))
            self.cost.charge(len(set(signatures)))

            try:
                values = self._lookup(generation, signatures)
            except Exception as e:
                results.extend(EventFailure(event, e) for event in group)
                continue

            found: Dict[int, Optional[SparseParameter]] = dict(zip(signatures, values))
            for event in group:
                params = {s: found[s] for s in _signatures(event.payload)}
                results.append(event.replace(payload=dict(event.payload, params=params)))
        return results

    def _lookup(self, generation: ModelGeneration, signatures: List[int]):
        cache = self.resources.cube_cache
        if cache is not None:
            try:
                return cache.get(generation.snapshot, signatures)
            except GenerationMismatch as e:
                LOG.debug("bypassing cube cache: %s", e)
        return generation.snapshot.lookup(signatures)


@register("model_inference")
class ModelInference(ServingOperator):
    """
    Scores the kept candidates of a batch with one dense model (setting ``model``). Scores
    still fresh in the model's query cache are reused (setting ``query_cache``, default
    true); the rest are forwarded as one matrix per generation.
    """

    def __init__(self, spec, resources: ServingResources = None, cost_multiplier: float = 1.0):
        super().__init__(spec, resources, cost_multiplier)
        if resources is None:
            raise ConfigError(f"processor {spec.id} needs serving resources")
        if "model" not in self.settings:
            raise ConfigError(f"processor {spec.id} does not name a model")
        self.model_name = str(self.settings["model"])
        self.use_query_cache = bool(self.settings.get("query_cache", True))

        metrics = resources.metrics
        self._forwarded = metrics.counter("scored_pairs_total", model=self.model_name)
        self._reused = metrics.counter("reused_pairs_total", model=self.model_name)

    @property
    def query_cache(self) -> Optional[QueryCache]:
        if not self.use_query_cache:
            return None
        return self.resources.query_caches.get(self.model_name)

    def process(self, events: List[Event], context: StageContext) -> List[OperatorResult]:
        results: List[OperatorResult] = []
        for generation, group in _by_generation(events).values():
            try:
                model = generation.model(self.model_name)
            except KeyError as e:
                results.extend(EventFailure(event, e) for event in group)
                continue

            rows: List[np.ndarray] = []
            prepared = []
            for event in group:
                try:
                    prepared.append((event, self._prepare(event, generation, model, rows, context)))
                except Exception as e:
                    results.append(EventFailure(event, e))

            self.cost.charge(len(rows))
            scores = forward(model, np.vstack(rows)) if rows else np.empty(0)
            self._forwarded.inc(len(rows))

            for event, (cached, hits, pending, now) in prepared:
                request: ScoreRequest = event.payload["request"]
                item_scores = dict(cached)
                for item, row in pending:
                    score = float(scores[row])
                    item_scores[item] = score
                    if self.query_cache is not None:
                        self.query_cache.put(
                            request.user, item, generation.generation, score, now
                        )
                self._reused.inc(len(hits))

                payload = {
                    k: v
                    for k, v in event.payload.items()
                    if k not in ("params", "user_signatures", "item_signatures")
                }
                payload["scores"] = {self.model_name: item_scores}
                payload["cache_hits"] = {self.model_name: hits}
                results.append(event.replace(payload=payload))
        return results

    def _prepare(self, event: Event, generation: ModelGeneration, model, rows, context):
        payload = event.payload
        request: ScoreRequest = payload["request"]
        user_signatures = payload.get("user_signatures", {})
        item_signatures = payload.get("item_signatures", {})

        known = generation.known_groups
        for group in user_signatures:
            if group not in known:
                raise UnknownGroup(group)
        for groups in item_signatures.values():
            for group in groups:
                if group not in known:
                    raise UnknownGroup(group)

        slots = model.slots.groups
        params = payload.get("params", {})
        user_part = {g: s for g, s in user_signatures.items() if g in slots}
        now = request_time(request, context)
        cache = self.query_cache

        cached: Dict[str, float] = {}
        hits: List[str] = []
        pending: List[Tuple[str, int]] = []
        inputs: List[np.ndarray] = []
        for candidate in payload["candidates"]:
            if cache is not None:
                score = cache.get(request.user, candidate.item, generation.generation, now)
                if score is not None:
                    cached[candidate.item] = score
                    hits.append(candidate.item)
                    continue
            features = dict(user_part)
            for group, signatures in item_signatures.get(candidate.item, {}).items():
                if group in slots:
                    features[group] = signatures
            inputs.append(assemble(features, model.slots, params, model.embedding_dim))
            pending.append((candidate.item, len(rows) + len(inputs) - 1))

        rows.extend(inputs)
        return cached, hits, pending, now


def serving_pipeline(
    models: Sequence[str] = ("dnn_ctr",),
    tenants: Mapping[str, Tuple[str, float]] = None,
    batch_sizes: Mapping[str, int] = None,
    parallelism: Mapping[str, int] = None,
    costs: Mapping[str, Mapping[str, float]] = None,
    slate_size: int = 10,
    query_cache: bool = True,
) -> Dict[str, Any]:
    """
    Builds the pipeline configuration of the scoring service::

        reader -> user -----------------------------> recombine -> shedder -> cube -> dnn
               -> item_extractor -> item_processor -/

    With several models the cube stage fans out to one inference processor per model
    (named after the model) and a ``merge`` join recombines their scores. With ``tenants``
    (tenant -> (model, weight)) a ``dispatch`` processor routes each request to exactly one
    model instead.

    :param costs: per processor id, simulated cost settings (``chunk_overhead_us``,
        ``unit_cost_us``)
    """
    if not models:
        raise ConfigError("the pipeline needs at least one model")
    batch = dict(DEFAULT_BATCH_SIZES, **(batch_sizes or {}))
    parallelism = parallelism or {}
    costs = costs or {}

    def processor(pid: str, operator: str, size_key: str = None, **settings) -> Dict[str, Any]:
        settings.update(costs.get(pid, {}))
        doc = {
            "id": pid,
            "operator": operator,
            "batch_size": batch.get(size_key or pid, 8),
            "parallelism": parallelism.get(pid, 1),
        }
        if settings:
            doc["settings"] = settings
        return doc

    if tenants:
        names = [model for model, _ in tenants.values()]
    else:
        names = list(models)
    single = len(names) == 1 and not tenants
    inference_ids = ["dnn"] if single else names

    processors = [
        processor("reader", "data_reader"),
        processor("user", "user_processor"),
        processor("item_extractor", "item_extractor"),
        processor("item_processor", "item_processor"),
        processor("recombine", "join"),
        processor(
            "shedder",
            "load_shedder",
            slate_size=slate_size,
            watch_stage=inference_ids[0],
        ),
        processor("cube", "cube_accessor"),
    ]
    for pid, model in zip(inference_ids, names):
        processors.append(
            processor(pid, "model_inference", "dnn", model=model, query_cache=query_cache)
        )

    edges = [
        ["reader", "user"],
        ["reader", "item_extractor"],
        ["item_extractor", "item_processor"],
        ["user", "recombine"],
        ["item_processor", "recombine"],
        ["recombine", "shedder"],
        ["shedder", "cube"],
    ]

    doc: Dict[str, Any] = {"schema_version": 1}
    if tenants:
        processors.append(processor("dispatch", "tenant_dispatch"))
        edges.append(["cube", "dispatch"])
        edges.extend(["dispatch", pid] for pid in inference_ids)
        doc["tenants"] = {
            tenant: {"entry": model, "weight": weight}
            for tenant, (model, weight) in tenants.items()
        }
    elif single:
        edges.append(["cube", "dnn"])
    else:
        processors.append(processor("merge", "join"))
        edges.extend(["cube", pid] for pid in inference_ids)
        edges.extend([pid, "merge"] for pid in inference_ids)

    doc["processors"] = processors
    doc["edges"] = edges
    return doc


def inference_models(pipeline_config: Mapping[str, Any]) -> List[str]:
    """
    The model names scored by the model_inference processors of a configuration.
    """
    return [
        str(p.get("settings", {}).get("model"))
        for p in pipeline_config.get("processors", [])
        if p.get("operator") == "model_inference"
    ]
