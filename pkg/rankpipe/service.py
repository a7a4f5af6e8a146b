"""
The scoring service: a PipelineEngine over the serving stages, the model store with its hot
reload watcher, the caches, the load shedder, and the HTTP surface in front of them.

Endpoints::

    POST /v1/score      ScoreRequest JSON -> ScoreResponse JSON
    POST /v1/feedback   {"user": "u1", "kind": "click"} -> {"invalidated": 3}
    GET  /v1/health     {"status": "ok", "ready": true, "generation": 5, "models": [...]}
    GET  /v1/metrics    Prometheus text exposition of the service registry
"""
import json
import logging
import os
import threading
import time
from concurrent.futures import Future
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Tuple

from werkzeug.exceptions import BadRequest, HTTPException
from werkzeug.routing import Map, Rule
from werkzeug.serving import make_server
from werkzeug.wrappers import Request, Response

from . import config, pipeline
from .cache import CubeCache, QueryCache, QueryCacheSweeper
from .cube import CorruptBlock, StaleGeneration, VerificationFailed
from .errors import ConfigError, RankpipeError
from .events import InferenceRequest, ScoredResponse
from .metrics import Metrics
from .models import ModelGeneration, ModelStore
from .pipeline import DeadlineExceeded, PipelineClosed, PipelineEngine, StageFailure
from .schema import MalformedRequest, ScoredItem, ScoreRequest, ScoreResponse
from .scorer import UnknownGroup
from .shedding import OverloadDetector, load_pruner
from .stages import ServingResources, inference_models, serving_pipeline

LOG = logging.getLogger(__name__)


class BindFailure(RankpipeError):
    def __init__(self, address: str, cause: Any) -> None:
        self.address = address
        self.cause = cause
        super().__init__(f"cannot listen on {address}: {cause}")


class ModelLoadFailure(RankpipeError):
    def __init__(self, model_root: str, cause: Any) -> None:
        self.model_root = model_root
        self.cause = cause
        super().__init__(f"cannot load a model generation from {model_root}: {cause}")


@dataclass
class ServiceConfig:
    listen: str = config.LISTEN_ADDRESS
    pipeline_config: Optional[str] = None
    model_root: str = config.MODEL_ROOT
    models: List[str] = field(default_factory=list)
    poll_interval: float = config.POLL_INTERVAL
    watch: bool = True
    request_timeout: float = config.REQUEST_DEADLINE

    # caches
    cube_cache: bool = True
    mem_ratio: float = config.CUBE_CACHE_MEM_RATIO
    disk_ratio: float = config.CUBE_CACHE_DISK_RATIO
    cache_dir: Optional[str] = None
    query_cache: bool = True
    query_window: float = config.QUERY_CACHE_WINDOW
    query_capacity: int = config.QUERY_CACHE_CAPACITY
    admission: float = config.QUERY_CACHE_ADMISSION
    sweep_interval: float = 30.0

    # shedding
    epsilon: float = config.SHED_EPSILON
    shedder_model: Optional[str] = None
    capacity_rps: Optional[float] = None
    capacity_fraction: float = config.CAPACITY_FRACTION
    queue_wait_threshold: Optional[float] = None
    force_overload: bool = False
    slate_size: int = 10

    split_table: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "ServiceConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown service config keys {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path: str) -> "ServiceConfig":
        try:
            with open(path, "r", encoding="utf-8") as fd:
                doc = json.load(fd)
        except OSError as e:
            raise ConfigError(f"cannot read service config {path}: {e}")
        except ValueError as e:
            raise ConfigError(f"service config {path} is not valid JSON: {e}")
        if not isinstance(doc, dict):
            raise ConfigError(f"service config {path} must be a JSON object")
        return cls.from_dict(doc)

    def override(self, **values) -> "ServiceConfig":
        """
        Returns a copy with every value that is not None replaced (CLI flags over file).
        """
        return replace(self, **{k: v for k, v in values.items() if v is not None})

    def validate(self) -> "ServiceConfig":
        """
        :raises ConfigError: if a path does not exist or a value is out of range
        """
        parse_address(self.listen)
        if not os.path.isdir(self.model_root):
            raise ConfigError(f"model root {self.model_root} does not exist")
        for path in (self.pipeline_config, self.shedder_model):
            if path and not os.path.isfile(path):
                raise ConfigError(f"file {path} does not exist")

        checks = [
            ("disk_ratio", self.disk_ratio, 0.001, 0.05),
            ("mem_ratio", self.mem_ratio, 0.0, self.disk_ratio),
            ("query_window", self.query_window, 60.0, 600.0),
            ("admission", self.admission, 0.0, 1.0),
            ("epsilon", self.epsilon, 0.0, 1.0),
            ("capacity_fraction", self.capacity_fraction, 0.0, 1.0),
        ]
        for name, value, low, high in checks:
            if not low <= value <= high:
                raise ConfigError(f"{name} {value} is outside [{low:g}, {high:g}]")
        if self.capacity_rps is not None and self.capacity_rps <= 0:
            raise ConfigError("capacity_rps must be positive")
        if self.slate_size < 1 or self.query_capacity < 0 or self.request_timeout <= 0:
            raise ConfigError("slate_size, query_capacity and request_timeout must be positive")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def parse_address(address: str) -> Tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"listen address must be host:port, got {address}")
    return host, int(port)


class ScoringService:
    """
    In-process scoring target. ``score`` runs one request through the pipeline while
    holding a lease on the model generation it started with.
    """

    def __init__(
        self,
        service_config: ServiceConfig,
        pipeline_config: Mapping[str, Any] = None,
        store: ModelStore = None,
    ) -> None:
        self.config = cfg = service_config
        self.metrics = Metrics()

        self._owns_store = store is None
        if store is None:
            try:
                store = ModelStore.open(cfg.model_root)
            except (VerificationFailed, StaleGeneration, OSError) as e:
                raise ModelLoadFailure(cfg.model_root, e)
        self.store = store

        if pipeline_config is None:
            if cfg.pipeline_config:
                pipeline_config = pipeline.load_pipeline_config(cfg.pipeline_config)
            else:
                pipeline_config = serving_pipeline(
                    models=cfg.models or sorted(store.current.models),
                    slate_size=cfg.slate_size,
                    query_cache=cfg.query_cache,
                )
        self.pipeline_config = pipeline_config

        self.models = inference_models(pipeline_config)
        missing = [m for m in self.models if m not in store.current.models]
        if missing:
            self._close_store()
            raise ModelLoadFailure(cfg.model_root, f"generation has no model {missing}")
        self.primary = self.models[0] if self.models else None

        cache_settings = dict(pipeline_config.get("cache") or {})
        shedding = dict(pipeline_config.get("shedding") or {})

        self.cube_cache: Optional[CubeCache] = None
        if cfg.cube_cache:
            self.cube_cache = CubeCache.for_snapshot(
                store.current.snapshot,
                mem_ratio=float(cache_settings.get("mem_ratio", cfg.mem_ratio)),
                disk_ratio=float(cache_settings.get("disk_ratio", cfg.disk_ratio)),
                directory=cfg.cache_dir,
                metrics=self.metrics,
            )

        self.query_caches: Dict[str, QueryCache] = {}
        if cfg.query_cache:
            window = float(cache_settings.get("query_window", cfg.query_window))
            for name in self.models:
                self.query_caches[name] = QueryCache(
                    window, cfg.query_capacity, cfg.admission, self.metrics, name
                )

        capacity = shedding.get("capacity_rps", cfg.capacity_rps)
        detector = None
        if capacity:
            detector = OverloadDetector(
                float(capacity),
                float(shedding.get("capacity_fraction", cfg.capacity_fraction)),
                queue_wait_threshold=shedding.get("queue_wait_threshold", cfg.queue_wait_threshold),
            )
        shedder_model = shedding.get("model", cfg.shedder_model)

        self.resources = ServingResources(
            store=store,
            cube_cache=self.cube_cache,
            query_caches=self.query_caches,
            detector=detector,
            pruner=load_pruner(shedder_model) if shedder_model else None,
            slate_size=int(shedding.get("slate_size", cfg.slate_size)),
            force_overload=bool(shedding.get("force_overload", cfg.force_overload)),
            metrics=self.metrics,
        )
        store.on_publish(self._on_publish)

        try:
            graph = pipeline.compile(pipeline_config, self.resources)
        except Exception:
            self._close_caches()
            self._close_store()
            raise
        self.engine = PipelineEngine(graph, self.metrics)
        if cfg.split_table:
            self.engine.set_split_table(cfg.split_table)

        self._sweeper: Optional[QueryCacheSweeper] = None
        self._latest_request_time = 0.0
        self._served = self.metrics.counter("served_pairs_total")
        self._latency = self.metrics.summary("request_latency_seconds")

    def start(self) -> "ScoringService":
        self.engine.start()
        if self.config.watch:
            self.store.watch(self.config.model_root, self.config.poll_interval)
        if self.query_caches and self.config.sweep_interval > 0:
            self._sweeper = QueryCacheSweeper(
                list(self.query_caches.values()),
                lambda: self._latest_request_time,
                self.config.sweep_interval,
            ).start()
        LOG.info(
            "scoring service ready, generation %d, models %s", self.store.generation, self.models
        )
        return self

    def close(self) -> None:
        if self._sweeper is not None:
            self._sweeper.close()
        self.engine.close()
        self.engine.graph.close()
        self._close_store()
        self._close_caches()

    def _close_store(self) -> None:
        if self._owns_store:
            self.store.close()

    def _close_caches(self) -> None:
        if self.cube_cache is not None:
            self.cube_cache.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *args):
        self.close()

    def _on_publish(self, generation: ModelGeneration) -> None:
        if self.cube_cache is not None:
            self.cube_cache.flush(generation.generation, generation.snapshot.key_count)
        for cache in self.query_caches.values():
            cache.flush()

    def submit(self, request: ScoreRequest) -> "Future[ScoreResponse]":
        """
        Submits a request and returns a future of its response. The model lease taken here
        is released when the pipeline is done with the request.
        """
        now = request.timestamp if request.timestamp is not None else time.monotonic()
        self._latest_request_time = max(self._latest_request_time, now)

        started = time.perf_counter()
        lease = self.store.acquire()
        inner = self.engine.submit(
            InferenceRequest(
                request.request_id,
                {"request": request, "lease": lease},
                tenant=request.tenant,
                timeout=self.config.request_timeout,
            )
        )

        outer: "Future[ScoreResponse]" = Future()
        outer.set_running_or_notify_cancel()

        def _done(future: Future) -> None:
            lease.release()
            try:
                outer.set_result(self.respond(request, future.result()))
            except Exception as e:
                outer.set_exception(e)
            finally:
                self._latency.observe(time.perf_counter() - started)

        inner.add_done_callback(_done)
        return outer

    def score(self, request: ScoreRequest, timeout: float = None) -> ScoreResponse:
        return self.submit(request).result(timeout=timeout)

    def respond(self, request: ScoreRequest, scored: ScoredResponse) -> ScoreResponse:
        scores: Dict[str, Dict[str, float]] = scored.payload.get("scores", {})
        hits = {model: set(items) for model, items in scored.payload.get("cache_hits", {}).items()}
        shed = set(scored.payload.get("shed", ()))

        items = []
        for candidate in request.candidates:
            if candidate.item in shed:
                continue
            per_model = {m: s[candidate.item] for m, s in scores.items() if candidate.item in s}
            if self.primary in per_model:
                score = per_model[self.primary]
            else:
                score = per_model[min(per_model)] if per_model else None
            cache_hit = bool(per_model) and all(
                candidate.item in hits.get(m, ()) for m in per_model
            )
            items.append(ScoredItem(candidate.item, score, per_model, cache_hit))

        dropped = [c.item for c in request.candidates if c.item in shed]
        self._served.inc(len(items) + len(dropped))
        return ScoreResponse(
            request_id=request.request_id,
            generation=scored.payload["generation"],
            items=items,
            tenant=scored.tenant,
            trace=[t.to_dict() for t in scored.trace],
            shed=dropped,
        )

    def feedback(self, user: str, kind: str = "click") -> int:
        self.metrics.counter("feedback_total", kind=kind).inc()
        return sum(cache.feedback(user, kind) for cache in self.query_caches.values())

    def health(self) -> Dict[str, Any]:
        return {
            "status": "ok",
            "ready": self.engine.started,
            "generation": self.store.generation,
            "models": sorted(self.store.current.models),
        }

    def cpu_seconds(self) -> Dict[str, float]:
        return {
            pid: self.metrics.value("stage_cpu_seconds_total", stage=pid)
            for pid in self.engine.graph.order
        }

    def stats(self) -> Dict[str, Any]:
        """
        A snapshot of the counters the metrics endpoint renders, as one JSON document.
        """
        served = self.metrics.value("served_pairs_total")
        cpu = self.cpu_seconds()
        total_cpu = sum(cpu.values())
        doc = {
            "generation": self.store.generation,
            "requests": {
                "ok": self.metrics.value("requests_total", outcome="ok"),
                "error": self.metrics.value("requests_total", outcome="error"),
            },
            "served_pairs": served,
            "scored_pairs": {
                m: self.metrics.value("scored_pairs_total", model=m) for m in self.models
            },
            "cpu_seconds": cpu,
            "cpu_cost": total_cpu / served * 1e6 if served else 0.0,
            "query_cache": {m: c.stats().to_dict() for m, c in self.query_caches.items()},
            "cutoff": self.metrics.summary("cutoff_fraction").quantiles(),
        }
        if self.cube_cache is not None:
            doc["cube_cache"] = self.cube_cache.stats().to_dict()
        return doc

    def metrics_text(self) -> str:
        self.metrics.gauge("model_generation").set(self.store.generation)
        self.metrics.gauge("inflight_requests").set(self.engine.pending())
        if self.cube_cache is not None:
            self.metrics.gauge("cube_cache_hit_ratio").set(self.cube_cache.stats().hit_ratio)
        for name, cache in self.query_caches.items():
            self.metrics.gauge("query_cache_hit_ratio", model=name).set(cache.stats().hit_ratio)
        for pid, processor in self.engine.graph.processors.items():
            self.metrics.gauge("stage_queue_high_water", stage=pid).set(
                processor.channel.high_water
            )
        return self.metrics.render()


def _json(doc: Any, status: int = 200) -> Response:
    return Response(json.dumps(doc), status=status, mimetype="application/json")


def error_status(error: Exception) -> Tuple[int, Exception]:
    """
    Maps a request-fatal error to its HTTP status and the error to report.
    """
    cause = error
    if isinstance(error, StageFailure) and isinstance(error.cause, Exception):
        cause = error.cause
    if isinstance(cause, (MalformedRequest, UnknownGroup)):
        return 400, cause
    if isinstance(error, DeadlineExceeded):
        return 504, error
    if isinstance(error, PipelineClosed):
        return 503, error
    if isinstance(cause, CorruptBlock):
        return 500, cause
    return 500, error


class ScoringApp:
    """
    WSGI application exposing a ScoringService.
    """

    def __init__(self, service: ScoringService) -> None:
        self.service = service
        self.url_map = Map(
            [
                Rule("/v1/score", endpoint="score", methods=["POST"]),
                Rule("/v1/feedback", endpoint="feedback", methods=["POST"]),
                Rule("/v1/health", endpoint="health", methods=["GET"]),
                Rule("/v1/metrics", endpoint="metrics", methods=["GET"]),
            ]
        )

    def dispatch(self, request: Request) -> Response:
        adapter = self.url_map.bind_to_environ(request.environ)
        try:
            endpoint, values = adapter.match()
            return getattr(self, f"on_{endpoint}")(request, **values)
        except HTTPException as e:
            return e.get_response()
        except RankpipeError as e:
            status, reported = error_status(e)
            if status >= 500:
                LOG.warning("request to %s failed: %s", request.path, e)
            return _json({"error": str(reported), "type": type(reported).__name__}, status)
        except Exception as e:
            LOG.exception("unexpected error while serving %s", request.path)
            return _json({"error": str(e), "type": type(e).__name__}, 500)

    @staticmethod
    def _body(request: Request) -> Any:
        try:
            return request.get_json(force=True)
        except BadRequest:
            raise MalformedRequest("request body is not valid JSON")

    def on_score(self, request: Request) -> Response:
        score_request = ScoreRequest.from_dict(self._body(request))
        return _json(self.service.score(score_request).to_dict())

    def on_feedback(self, request: Request) -> Response:
        doc = self._body(request)
        if not isinstance(doc, dict) or not doc.get("user"):
            raise MalformedRequest("feedback needs a user")
        count = self.service.feedback(str(doc["user"]), str(doc.get("kind") or "click"))
        return _json({"invalidated": count})

    def on_health(self, request: Request) -> Response:
        doc = self.service.health()
        return _json(doc, 200 if doc["ready"] else 503)

    def on_metrics(self, request: Request) -> Response:
        text = self.service.metrics_text()
        return Response(text, content_type=self.service.metrics.content_type)

    def __call__(self, environ, start_response):
        response = self.dispatch(Request(environ))
        return response(environ, start_response)


class ServiceHandle:
    """
    A running HTTP server in front of a started ScoringService.
    """

    def __init__(self, service: ScoringService, server) -> None:
        self.service = service
        self.server = server
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        return f"http://{self.server.host}:{self.server.port}"

    def serve_forever(self) -> None:
        LOG.info("serving on %s", self.url)
        self.server.serve_forever()

    def start(self) -> "ServiceHandle":
        self._thread = threading.Thread(target=self.serve_forever, name="http", daemon=True)
        self._thread.start()
        return self

    def shutdown(self) -> None:
        self.server.shutdown()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.server.server_close()
        self.service.close()

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.shutdown()


def serve(
    service_config: ServiceConfig, pipeline_config: Mapping[str, Any] = None
) -> ServiceHandle:
    """
    Starts the scoring service and binds its HTTP server. Call ``serve_forever`` or
    ``start`` on the returned handle.

    :raises ModelLoadFailure: if no model generation can be loaded
    :raises BindFailure: if the listen address cannot be bound
    """
    host, port = parse_address(service_config.listen)
    service = ScoringService(service_config, pipeline_config)
    try:
        server = make_server(host, port, ScoringApp(service), threaded=True)
    except (OSError, SystemExit) as e:
        service.close()
        raise BindFailure(service_config.listen, e)
    service.start()
    return ServiceHandle(service, server)
