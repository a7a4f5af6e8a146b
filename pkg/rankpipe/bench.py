"""
Acceptance benchmark: runs each measurement against desk-scale workloads and writes one JSON
report with the measured values and a pass flag per section.
"""
import copy
import itertools
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import config, costs, pipeline
from .cache import CubeCache
from .cmaes import NoFeasiblePointFound, cma_es_constrained
from .cube import CubeSnapshot, sign
from .events import InferenceRequest
from .legacy import LegacyPipeline
from .models import DEFAULT_MODELS, ModelStore, group_overlap, write_synthetic_generation
from .pipeline import PipelineEngine
from .service import ScoringService, ServiceConfig
from .shedding import (
    OverloadDetector,
    SheddingFeatures,
    degradation,
    keep_count,
    label_requests,
    sort_candidates,
    synthetic_final_scorer,
    train_pruner,
)
from .space import continuous_space
from .stages import ServingResources, serving_pipeline
from .tuning import (
    DEFAULT_COST_PROFILE,
    PipelineHarness,
    collect_logs,
    default_space,
    desk_allocator_model,
    fit_surrogates,
    run_plan,
    tune,
)
from .workload import (
    TraceRecord,
    WorkloadSpec,
    calibrate_zipf,
    generate,
    load_correlation,
    replay,
    sample_ranks,
    zipf_cdf,
)

LOG = logging.getLogger(__name__)

SECTIONS = (
    "cube_cache",
    "query_cache",
    "staged_vs_legacy",
    "constrained_cma_es",
    "load_shedding",
    "hot_reload",
    "multi_tenant",
    "offline_tuning",
)

FLAT_PROFILE = (1.0,) * 24


@dataclass
class BenchSettings:
    """
    :param model_root: a model root with at least one generation; a synthetic one is written
        to the work directory when None
    :param quick: scale every section down (smoke runs; thresholds still reported)
    """

    model_root: Optional[str] = None
    work_dir: Optional[str] = None
    seed: int = 0
    quick: bool = False
    sections: Sequence[str] = tuple(s for s in SECTIONS if s != "offline_tuning")
    key_universe: int = 10_000
    max_inflight: int = 4
    service_overrides: Dict[str, Any] = field(default_factory=dict)


class BenchContext:
    def __init__(self, settings: BenchSettings, trace: Optional[Sequence[TraceRecord]]):
        self.settings = settings
        self.work_dir = settings.work_dir or tempfile.mkdtemp(prefix="rankpipe-bench-")
        os.makedirs(self.work_dir, exist_ok=True)

        self.model_root = settings.model_root
        if self.model_root is None:
            self.model_root = os.path.join(self.work_dir, "models")
            write_synthetic_generation(
                os.path.join(self.model_root, "gen-1"),
                1,
                key_universe=settings.key_universe,
                seed=settings.seed,
            )
        self._trace = list(trace) if trace is not None else None

    @property
    def trace(self) -> List[TraceRecord]:
        if self._trace is None:
            quick = self.settings.quick
            spec = WorkloadSpec(
                key_universe=self.settings.key_universe,
                zipf_exponent=calibrate_zipf(
                    self.settings.key_universe, 0.01, config.ZIPF_TOP_MASS
                ),
                user_count=200 if quick else 1000,
                item_count=2000,
                recurrence_prob=0.6,
                recurrence_window=120.0,
                diurnal_profile=FLAT_PROFILE,
                duration=120.0 if quick else 600.0,
                base_rate=2.0,
                candidates=20 if quick else 50,
                seed=self.settings.seed,
            )
            self._trace = generate(spec)
        return self._trace

    def service(self, pipeline_config: Mapping[str, Any] = None, **overrides) -> ScoringService:
        values = dict(model_root=self.model_root, watch=False, sweep_interval=0)
        values.update(self.settings.service_overrides)
        values.update(overrides)
        return ScoringService(ServiceConfig(**values), pipeline_config)


def zipf_cache_stats(
    snapshot: CubeSnapshot,
    ranks: Sequence[int],
    mem_ratio: float = config.CUBE_CACHE_MEM_RATIO,
    disk_ratio: float = config.CUBE_CACHE_DISK_RATIO,
    directory: str = None,
    batch: int = 1000,
):
    """
    Replays a stream of key ranks (rank i is key ``k<i>``) through a fresh cube cache and
    returns its statistics.
    """
    signatures = [sign(f"k{i}") for i in range(snapshot.key_count)]
    cache = CubeCache.for_snapshot(
        snapshot, mem_ratio=mem_ratio, disk_ratio=disk_ratio, directory=directory
    )
    try:
        for start in range(0, len(ranks), batch):
            cache.get(snapshot, [signatures[r] for r in ranks[start : start + batch]])
        return cache.stats()
    finally:
        cache.close()


def cube_cache_section(ctx: BenchContext) -> Dict[str, Any]:
    """
    Hit ratio of the two-level cube cache (1% disk, 0.1% memory) on a Zipf stream
    calibrated to put ``config.ZIPF_TOP_MASS`` of the lookups on 1% of the keys.
    """
    quick = ctx.settings.quick
    universe = 20_000 if quick else 100_000
    accesses = 200_000 if quick else 1_000_000
    directory = os.path.join(ctx.work_dir, "zipf-cube")
    write_synthetic_generation(
        directory, 1, key_universe=universe, embedding_dim=4, seed=ctx.settings.seed
    )

    exponent = calibrate_zipf(universe, 0.01, config.ZIPF_TOP_MASS)
    rng = np.random.default_rng(ctx.settings.seed)
    ranks = sample_ranks(rng, zipf_cdf(exponent, universe), accesses)

    with CubeSnapshot.load(directory) as snapshot:
        stats = zipf_cache_stats(snapshot, ranks, 0.001, 0.01, ctx.work_dir)

    return {
        "zipf_exponent": exponent,
        "top_mass": config.ZIPF_TOP_MASS,
        "key_universe": universe,
        "accesses": accesses,
        "stats": stats.to_dict(),
        "hit_ratio": stats.hit_ratio,
        "pass": 0.80 <= stats.hit_ratio <= 0.90,
    }


def query_cache_section(ctx: BenchContext) -> Dict[str, Any]:
    """
    Scorer invocations with the query cache on against off, on the same trace.
    """
    scored, summaries = {}, {}
    for enabled in (False, True):
        with ctx.service(query_cache=enabled) as service:
            result = replay(ctx.trace, service, max_inflight=ctx.settings.max_inflight)
            scored[enabled] = sum(service.stats()["scored_pairs"].values())
            summaries["on" if enabled else "off"] = result.summary()

    savings = 1.0 - scored[True] / scored[False] if scored[False] else 0.0
    return {
        "scored_pairs_off": scored[False],
        "scored_pairs_on": scored[True],
        "savings": savings,
        "query_hit_ratio": summaries["on"]["cache"].get("query_hit_ratio", {}),
        "cube_hit_ratio": summaries["on"]["cache"].get("cube_hit_ratio"),
        "replay": summaries,
        "pass": savings >= 0.18,
    }


def with_service_time(
    pipeline_config: Mapping[str, Any],
    after: str = "shedder",
    service_ms: float = 2.0,
    tail_fraction: float = 0.01,
    tail_multiplier: float = 50.0,
    parallelism: int = 4,
) -> Dict[str, Any]:
    """
    Inserts a ``feature_io`` sleep stage with heavy-tailed service time behind ``after``:
    by default 1% of the events take 50 times the base ``service_ms``.
    """
    cfg = copy.deepcopy(dict(pipeline_config))
    successors = [e[1] for e in cfg["edges"] if e[0] == after]
    cfg["edges"] = [e for e in cfg["edges"] if e[0] != after]
    cfg["edges"].append([after, "feature_io"])
    cfg["edges"].extend(["feature_io", s] for s in successors)
    cfg["processors"].append(
        {
            "id": "feature_io",
            "operator": "sleep",
            "batch_size": 4,
            "parallelism": parallelism,
            "settings": {
                "service_ms": service_ms,
                "tail_fraction": tail_fraction,
                "tail_multiplier": tail_multiplier,
            },
        }
    )
    for processor in cfg["processors"]:
        if processor["operator"] == "join":
            processor["join_timeout"] = 60.0
    return cfg


def _outcomes(futures: Sequence[Future]) -> List[Any]:
    outcomes = []
    for future in futures:
        try:
            outcomes.append(future.result())
        except Exception as e:
            outcomes.append(e)
    return outcomes


def staged_section(ctx: BenchContext) -> Dict[str, Any]:
    """
    Throughput of the asynchronous engine against the synchronous baseline on the same
    graph, with a heavy-tailed stage, and equality of their score sets.
    """
    records = ctx.trace[: 100 if ctx.settings.quick else 400]
    cfg = with_service_time(serving_pipeline(query_cache=False))

    store = ModelStore.open(ctx.model_root)
    lease = store.acquire()
    try:
        resources = ServingResources(store=store)
        requests = [
            InferenceRequest(
                f"r{i}", {"request": r.to_request(f"r{i}"), "lease": lease}, timeout=600.0
            )
            for i, r in enumerate(records)
        ]

        graph = pipeline.compile(cfg, resources)
        with PipelineEngine(graph, resources.metrics) as engine:
            started = time.perf_counter()
            staged = _outcomes([engine.submit(r) for r in requests])
            staged_wall = time.perf_counter() - started
        graph.close()

        graph = pipeline.compile(cfg, resources)
        with LegacyPipeline(graph) as legacy:
            started = time.perf_counter()
            baseline = legacy.run(requests)
            legacy_wall = time.perf_counter() - started
        graph.close()
    finally:
        lease.release()
        store.close()

    failures = sum(isinstance(o, Exception) for o in itertools.chain(staged, baseline))
    identical = failures == 0 and all(
        a.payload["scores"] == b.payload["scores"] for a, b in zip(staged, baseline)
    )
    staged_tput = len(requests) / staged_wall if staged_wall else 0.0
    legacy_tput = len(requests) / legacy_wall if legacy_wall else 0.0
    ratio = staged_tput / legacy_tput if legacy_tput else 0.0
    return {
        "requests": len(requests),
        "staged_throughput": staged_tput,
        "legacy_throughput": legacy_tput,
        "throughput_ratio": ratio,
        "failures": failures,
        "identical_scores": identical,
        "pass": ratio >= 1.5 and identical,
    }


def cma_es_section(ctx: BenchContext) -> Dict[str, Any]:
    """
    Minimizes the sphere in five dimensions subject to x0 >= 1 over ten seeds.
    """
    space = continuous_space(5, -5.0, 5.0, default=2.0)
    runs = []
    for seed in range(10):
        try:
            result = cma_es_constrained(
                lambda p: sum(v * v for v in p.values()),
                [lambda p: 1.0 - p["x0"]],
                space,
                budget=2000,
                seed=ctx.settings.seed + seed,
            )
            error = abs(result.best_objective - 1.0)
        except NoFeasiblePointFound:
            error = float("inf")
        runs.append(error)
    successes = sum(e <= 1e-2 for e in runs)
    return {"errors": runs, "successes": successes, "pass": successes >= 9}


def shedding_section(ctx: BenchContext) -> Dict[str, Any]:
    """
    Trains a pruner on the first 70% of a diurnal trace, measures its recall@N degradation
    under forced overload on the rest, and correlates the online cutoff with traffic.
    """
    quick = ctx.settings.quick
    epsilon, slate = config.SHED_EPSILON, 10
    duration = 1200.0 if quick else 2400.0
    spec = WorkloadSpec(
        key_universe=1000,
        user_count=500,
        item_count=5000,
        recurrence_prob=0.0,
        duration=duration,
        day_length=duration,
        base_rate=1.0,
        candidates=50,
        features_per_group=1,
        seed=ctx.settings.seed,
    )
    records = generate(spec)
    split = int(len(records) * 0.7)
    scorer = synthetic_final_scorer()
    window = duration / 48

    def detector() -> OverloadDetector:
        return OverloadDetector(spec.base_rate, config.CAPACITY_FRACTION, window)

    train = label_requests(records[:split], scorer, slate, epsilon, detector())
    model = train_pruner(
        train, seed=ctx.settings.seed, epsilon=epsilon, min_records=500 if quick else 1000
    )

    heldout = label_requests(records[split:], scorer, slate, epsilon, detector())
    losses = np.array(
        [
            degradation(r.top_positions, slate, keep_count(model, r.features, r.n, slate, True))
            for r in heldout
        ]
    )

    online = detector()
    cutoffs = []
    for record in records:
        online.observe(record.timestamp)
        candidates = sort_candidates(record.candidates)
        features = SheddingFeatures.from_scores(
            online.quota(record.timestamp),
            online.cutoff_ratio_prev,
            record.qid,
            [c.escore for c in candidates],
        )
        overload = online.overloaded(record.timestamp)
        keep = keep_count(model, features, len(candidates), slate, overload)
        online.cutoff_ratio_prev = 1.0 - keep / len(candidates)
        cutoffs.append(online.cutoff_ratio_prev)

    correlation = load_correlation([r.timestamp for r in records], cutoffs, window)
    mean_loss = float(losses.mean()) if len(losses) else 0.0
    return {
        "train_records": len(train),
        "heldout_records": len(heldout),
        "epsilon": epsilon,
        "mean_degradation": mean_loss,
        "p95_degradation": float(np.quantile(losses, 0.95)) if len(losses) else 0.0,
        "mean_cutoff": float(np.mean(cutoffs)) if cutoffs else 0.0,
        "load_correlation": correlation,
        "pruner": model.metadata,
        "pass": mean_loss <= epsilon + 0.02 and correlation > 0,
    }


def reload_section(ctx: BenchContext) -> Dict[str, Any]:
    """
    Publishes new generations while a sustained replay runs and counts failed requests.
    """
    quick = ctx.settings.quick
    reloads = 3 if quick else 10
    rate = 100.0 if quick else 500.0
    universe = 2000
    root = os.path.join(ctx.work_dir, "reload-models")
    write_synthetic_generation(
        os.path.join(root, "gen-1"), 1, key_universe=universe, seed=ctx.settings.seed
    )
    trace = generate(
        WorkloadSpec(
            key_universe=universe,
            base_rate=rate,
            duration=reloads * 1.0 + 2.0,
            diurnal_profile=FLAT_PROFILE,
            candidates=10,
            recurrence_prob=0.0,
            seed=ctx.settings.seed,
        )
    )

    service_config = ServiceConfig(
        model_root=root, poll_interval=0.1, request_timeout=30.0, sweep_interval=0
    )
    results = []
    with ScoringService(service_config) as service:
        runner = threading.Thread(
            target=lambda: results.append(
                replay(trace, service, speed_multiplier=1.0, max_inflight=64, keep_responses=True)
            )
        )
        runner.start()
        for generation in range(2, reloads + 2):
            time.sleep(1.0)
            write_synthetic_generation(
                os.path.join(root, f"gen-{generation}"),
                generation,
                key_universe=universe,
                seed=ctx.settings.seed,
            )
        runner.join()

        deadline = time.monotonic() + 10.0
        while service.store.generation < reloads + 1 and time.monotonic() < deadline:
            time.sleep(0.1)
        performed = service.store.reloads

    result = results[0]
    served = sorted({r.generation for r in result.responses if r is not None})
    return {
        "requests": result.requests,
        "failed": result.failed,
        "errors": result.errors,
        "reloads": performed,
        "generations_served": served,
        "throughput": result.throughput,
        "pass": result.failed == 0 and performed == reloads,
    }


def consolidation_section(ctx: BenchContext) -> Dict[str, Any]:
    """
    Three models in one pipeline with shared upstream stages against three single-model
    services on the same trace: total CPU and per-model score equality.
    """
    records = ctx.trace[: 150 if ctx.settings.quick else 600]
    models = sorted(DEFAULT_MODELS)
    profile = dict(DEFAULT_COST_PROFILE)
    for name in models:
        profile[name] = DEFAULT_COST_PROFILE["dnn"]

    def run(names: Sequence[str]):
        cfg = serving_pipeline(models=names, costs=profile, query_cache=False)
        with ctx.service(cfg, query_cache=False) as service:
            result = replay(
                records, service, max_inflight=ctx.settings.max_inflight, keep_responses=True
            )
            return result, sum(service.cpu_seconds().values())

    shared_result, shared_cpu = run(models)
    isolated_cpu = 0.0
    identical = shared_result.failed == 0
    for name in models:
        result, cpu = run([name])
        isolated_cpu += cpu
        identical = identical and result.failed == 0
        for a, b in zip(shared_result.responses, result.responses):
            if a is None or b is None:
                identical = False
                continue
            identical = identical and a.scores(name) == b.scores(name)

    overlap = group_overlap({m: DEFAULT_MODELS[m] for m in models})
    reduction = 1.0 - shared_cpu / isolated_cpu if isolated_cpu else 0.0
    return {
        "models": models,
        "shared_feature_groups": overlap,
        "consolidated_cpu_seconds": shared_cpu,
        "isolated_cpu_seconds": isolated_cpu,
        "cpu_reduction": reduction,
        "identical_scores": identical,
        "pass": reduction >= 0.40 and identical and overlap >= 0.80,
    }


def tuning_section(ctx: BenchContext) -> Dict[str, Any]:
    """
    End-to-end offline tuning on the in-process harness.
    """
    quick = ctx.settings.quick
    space = default_space()
    cfg = serving_pipeline(costs=DEFAULT_COST_PROFILE)
    harness = PipelineHarness(
        cfg,
        ServiceConfig(model_root=ctx.model_root, **ctx.settings.service_overrides),
        ctx.trace[: 60 if quick else 150],
        space,
    )
    previous = costs.set_allocator_hook(desk_allocator_model)
    try:
        logs = collect_logs(harness, run_plan(space, space.dimension * 10, ctx.settings.seed))
        surrogates = fit_surrogates(logs, space, seed=ctx.settings.seed)
        result = tune(
            space,
            surrogates,
            finalists=3 if quick else config.FINALISTS,
            harness=harness,
            budget=500 if quick else config.CMA_ES_BUDGET,
            seed=ctx.settings.seed,
        )
    finally:
        costs.set_allocator_hook(previous)

    report = result.report
    reduction = report.get("cpu_cost_reduction", 0.0)
    return {
        "records": len(logs),
        "recommended": report["recommended"],
        "cpu_cost_reduction": reduction,
        "latency_regression": report.get("latency_regression", 0.0),
        "report": report,
        "pass": reduction >= 0.08 and report.get("latency_regression", 0.0) <= 0.05,
    }


RUNNERS: Dict[str, Callable[[BenchContext], Dict[str, Any]]] = {
    "cube_cache": cube_cache_section,
    "query_cache": query_cache_section,
    "staged_vs_legacy": staged_section,
    "constrained_cma_es": cma_es_section,
    "load_shedding": shedding_section,
    "hot_reload": reload_section,
    "multi_tenant": consolidation_section,
    "offline_tuning": tuning_section,
}


def bench(
    settings: BenchSettings,
    trace: Optional[Sequence[TraceRecord]] = None,
    report_path: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Runs the selected sections and returns (and optionally writes) the report. A section
    that raises is reported with its error and fails.
    """
    unknown = set(settings.sections) - set(RUNNERS)
    if unknown:
        raise ValueError(f"unknown bench sections {sorted(unknown)}")

    ctx = BenchContext(settings, trace)
    report: Dict[str, Any] = {"seed": settings.seed, "quick": settings.quick, "sections": {}}
    started = time.perf_counter()
    for name in settings.sections:
        LOG.info("running bench section %s", name)
        section_started = time.perf_counter()
        try:
            section = RUNNERS[name](ctx)
        except Exception as e:
            LOG.exception("bench section %s failed", name)
            section = {"error": str(e), "type": type(e).__name__, "pass": False}
        section["seconds"] = time.perf_counter() - section_started
        report["sections"][name] = section
        LOG.info("section %s: %s", name, "pass" if section["pass"] else "FAIL")

    staged = report["sections"].get("staged_vs_legacy")
    if staged and "throughput_ratio" in staged:
        report["throughput_ratio"] = staged["throughput_ratio"]
    report["seconds"] = time.perf_counter() - started
    report["pass"] = all(s["pass"] for s in report["sections"].values())

    if report_path:
        with open(report_path, "w", encoding="utf-8") as fd:
            json.dump(report, fd, indent=2, default=str)
    return report
