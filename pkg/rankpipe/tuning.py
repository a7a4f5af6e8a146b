"""
Offline resource tuning: measure stages of the scoring pipeline under varying parameters,
fit per-stage surrogates for latency and CPU use, search the parameter space for the point
that minimizes the predicted CPU use without any stage getting slower than at the defaults,
and validate the best candidates by measuring them.
"""
import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import config
from .cmaes import OptimizationResult, cma_es_constrained
from .errors import RankpipeError
from .pipeline import apply_overlay
from .service import ScoringService, ServiceConfig
from .shedding import InsufficientData
from .space import ParameterSpace, TuningPoint, default_space
from .workload import TraceRecord, replay

LOG = logging.getLogger(__name__)

__all__ = [
    "AllFinalistsRegressed",
    "DEFAULT_COST_PROFILE",
    "HarnessFailure",
    "Measurement",
    "PipelineHarness",
    "StageLogRecord",
    "Surrogate",
    "SurrogatePair",
    "TuningResult",
    "collect_logs",
    "default_space",
    "desk_allocator_model",
    "fit_surrogates",
    "run_plan",
    "tune",
]

# simulated per-chunk and per-unit CPU cost of the serving stages, in microseconds
DEFAULT_COST_PROFILE = {
    "user": {"chunk_overhead_us": 300.0, "unit_cost_us": 10.0},
    "item_extractor": {"chunk_overhead_us": 200.0, "unit_cost_us": 1.0},
    "item_processor": {"chunk_overhead_us": 200.0, "unit_cost_us": 2.0},
    "cube": {"chunk_overhead_us": 300.0, "unit_cost_us": 0.5},
    "dnn": {"chunk_overhead_us": 300.0, "unit_cost_us": 2.0},
}


class HarnessFailure(RankpipeError):
    def __init__(self, point: Mapping[str, Any], cause: Any) -> None:
        self.point = point
        self.cause = cause
        super().__init__(f"harness run at {point} failed: {cause}")


class AllFinalistsRegressed(RankpipeError):
    def __init__(self, finalists: int) -> None:
        self.finalists = finalists
        super().__init__(f"all {finalists} finalists regressed latency against the defaults")


def desk_allocator_model(knobs: Mapping[str, Any]) -> float:
    """
    A synthetic allocator cost multiplier for desk runs: contention falls with more arenas,
    fragmentation grows with the max active extent, and huge pages shave a few percent.
    """
    arenas = float(knobs.get("arenas", 500))
    extent = float(knobs.get("max_active_extent", 6))
    multiplier = 1.0 + 0.06 * (700.0 - arenas) / 350.0 + 0.04 * (extent - 5.0) / 35.0
    if knobs.get("huge_page") == "Always":
        multiplier *= 0.97
    return multiplier


@dataclass
class Measurement:
    """
    What one harness run at one point observed. Latencies in milliseconds, CPU use in
    CPU-seconds per 10^3 events, cpu_cost in CPU-seconds per 10^6 served pairs.
    """

    point: TuningPoint
    latency_ms: Dict[str, float]
    cpu_per_k: Dict[str, float]
    cpu_cost: float = 0.0
    traffic: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "point": self.point.to_dict(),
            "latency_ms": self.latency_ms,
            "cpu_per_k": self.cpu_per_k,
            "cpu_cost": self.cpu_cost,
            "traffic": self.traffic,
        }


@dataclass
class StageLogRecord:
    stage: str
    point: TuningPoint
    latency_ms: float
    cpu_per_k: float
    traffic: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self):
        if self.latency_ms < 0 or self.cpu_per_k < 0:
            raise ValueError("latency and resource use must not be negative")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "stage": self.stage,
            "point": self.point.to_dict(),
            "latency_ms": self.latency_ms,
            "cpu_per_k": self.cpu_per_k,
            "traffic": self.traffic,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "StageLogRecord":
        return cls(
            stage=doc["stage"],
            point=TuningPoint(doc["point"]),
            latency_ms=float(doc["latency_ms"]),
            cpu_per_k=float(doc["cpu_per_k"]),
            traffic=float(doc.get("traffic", 0.0)),
            timestamp=float(doc.get("timestamp", 0.0)),
        )


def write_logs(records: Sequence[StageLogRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fd:
        for record in records:
            fd.write(json.dumps(record.to_dict()))
            fd.write("\n")


def read_logs(path: str) -> List[StageLogRecord]:
    with open(path, "r", encoding="utf-8") as fd:
        return [StageLogRecord.from_dict(json.loads(line)) for line in fd if line.strip()]


class PipelineHarness:
    """
    Runs a workload trace through a fresh in-process scoring service built from the base
    pipeline configuration with a tuning point applied as overlay, and reads per-stage
    latency and thread CPU time from the service metrics.
    """

    def __init__(
        self,
        pipeline_config: Mapping[str, Any],
        service_config: ServiceConfig,
        trace: Sequence[TraceRecord],
        space: ParameterSpace,
        max_inflight: int = 8,
    ) -> None:
        if not trace:
            raise ValueError("the harness needs a nonempty workload")
        self.pipeline_config = pipeline_config
        self.service_config = replace(service_config, watch=False, sweep_interval=0)
        self.trace = trace
        self.space = space
        self.max_inflight = max_inflight

        processors = {p["id"] for p in pipeline_config.get("processors", [])}
        self.stages = [s for s in space.stages() if s in processors]

    def measure(self, point: TuningPoint) -> Measurement:
        """
        :raises HarnessFailure: if the service cannot be built or any request fails
        """
        cfg = apply_overlay(self.pipeline_config, self.space.to_overlay(point))
        try:
            service = ScoringService(self.service_config, cfg)
        except RankpipeError as e:
            raise HarnessFailure(point, e)

        with service:
            try:
                result = replay(self.trace, service, max_inflight=self.max_inflight)
            except RankpipeError as e:
                raise HarnessFailure(point, e)
            if result.failed:
                raise HarnessFailure(point, f"{result.failed} requests failed {result.errors}")

            metrics = service.metrics
            latency, cpu = {}, {}
            for stage in self.stages:
                summary = metrics.summary("stage_latency_seconds", stage=stage)
                events = metrics.value("stage_events_total", stage=stage)
                latency[stage] = summary.total / summary.count * 1e3 if summary.count else 0.0
                cpu_seconds = metrics.value("stage_cpu_seconds_total", stage=stage)
                cpu[stage] = cpu_seconds / events * 1e3 if events else 0.0
            cpu_cost = service.stats()["cpu_cost"]

        LOG.debug("measured %s: cpu_cost %.3f", point, cpu_cost)
        return Measurement(point, latency, cpu, cpu_cost, result.throughput)


def run_plan(space: ParameterSpace, n: int, seed: int = 0) -> List[TuningPoint]:
    """
    The defaults followed by ``n`` points drawn uniformly from the space.
    """
    rng = np.random.default_rng(seed)
    return [space.defaults()] + [space.sample(rng) for _ in range(n)]


def collect_logs(
    harness,
    plan: Sequence[TuningPoint],
    repetitions: int = 1,
    skip_failures: bool = True,
) -> List[StageLogRecord]:
    """
    Measures every point of the plan ``repetitions`` times and emits one record per stage
    and run. All points are checked against the space before anything runs.

    :raises PointOutOfRange: if a point of the plan is outside the space
    :raises HarnessFailure: if a run fails and ``skip_failures`` is false
    """
    for point in plan:
        harness.space.validate(point)

    records: List[StageLogRecord] = []
    for i, point in enumerate(plan):
        runs: List[StageLogRecord] = []
        try:
            for _ in range(repetitions):
                m = harness.measure(point)
                now = time.time()
                runs.extend(
                    StageLogRecord(
                        stage, point, m.latency_ms[stage], m.cpu_per_k[stage], m.traffic, now
                    )
                    for stage in harness.stages
                )
        except HarnessFailure as e:
            if not skip_failures:
                raise
            LOG.warning("discarding records of point %d: %s", i, e)
            continue
        records.extend(runs)
        LOG.debug("collected point %d/%d", i + 1, len(plan))

    LOG.info("collected %d stage records from %d points", len(records), len(plan))
    return records


class Surrogate:
    """
    Ensemble regressor: the mean of a quadratic ridge regression and a 1-nearest-neighbor
    lookup, both on encodings normalized to the unit box of the space.
    """

    def __init__(self, lower: np.ndarray, upper: np.ndarray, alpha: float = 1e-6) -> None:
        self.lower = np.asarray(lower, dtype=np.float64)
        self.span = np.maximum(np.asarray(upper, dtype=np.float64) - self.lower, 1e-12)
        self.alpha = alpha
        self.coef: Optional[np.ndarray] = None
        self.x: Optional[np.ndarray] = None
        self.y: Optional[np.ndarray] = None

    def _normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(x) - self.lower) / self.span

    @staticmethod
    def _design(z: np.ndarray) -> np.ndarray:
        n, d = z.shape
        i, j = np.triu_indices(d)
        return np.hstack([np.ones((n, 1)), z, z[:, i] * z[:, j]])

    def fit(self, x: np.ndarray, y: np.ndarray) -> "Surrogate":
        z = self._normalize(x)
        phi = self._design(z)
        penalty = self.alpha * np.eye(phi.shape[1])
        penalty[0, 0] = 0.0
        try:
            self.coef = np.linalg.solve(phi.T @ phi + penalty, phi.T @ y)
        except np.linalg.LinAlgError:
            self.coef = np.linalg.lstsq(phi, y, rcond=None)[0]
        self.x = z
        self.y = np.asarray(y, dtype=np.float64)
        return self

    def ridge(self, x: np.ndarray) -> np.ndarray:
        return self._design(self._normalize(x)) @ self.coef

    def nearest(self, x: np.ndarray) -> np.ndarray:
        z = self._normalize(x)
        distances = ((z[:, None, :] - self.x[None, :, :]) ** 2).sum(axis=2)
        return self.y[np.argmin(distances, axis=1)]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.ridge(x) + self.nearest(x)) / 2.0

    def __call__(self, x: np.ndarray) -> float:
        return float(self.predict(x)[0])


@dataclass
class SurrogatePair:
    stage: str
    resource: Surrogate
    latency: Surrogate
    resource_rmse: float = 0.0
    latency_rmse: float = 0.0
    records: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "resource_rmse": self.resource_rmse,
            "latency_rmse": self.latency_rmse,
            "records": self.records,
        }


def _rmse(model: Surrogate, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sqrt(np.mean((model.predict(x) - y) ** 2)))


def fit_surrogates(
    records: Sequence[StageLogRecord],
    space: ParameterSpace,
    seed: int = 0,
    alpha: float = 1e-6,
) -> Dict[str, SurrogatePair]:
    """
    Fits a latency and a resource surrogate per stage. The reported error is the RMSE on a
    held-out 20% of the records of a model fitted to the other 80%; the returned models are
    fitted to all records.

    :raises InsufficientData: if a stage has fewer than 10 records per space dimension
    """
    by_stage: Dict[str, List[StageLogRecord]] = {}
    for record in records:
        by_stage.setdefault(record.stage, []).append(record)
    if not by_stage:
        raise InsufficientData(0, space.dimension * 10)

    rng = np.random.default_rng(seed)
    lower, upper = space.lower, space.upper
    need = space.dimension * 10
    pairs = {}
    for stage in sorted(by_stage):
        rs = by_stage[stage]
        if len(rs) < need:
            raise InsufficientData(len(rs), need)

        x = np.stack([space.encode(r.point) for r in rs])
        targets = {
            "latency": np.array([r.latency_ms for r in rs]),
            "resource": np.array([r.cpu_per_k for r in rs]),
        }
        order = rng.permutation(len(rs))
        n_test = max(1, len(rs) // 5)
        test, train = order[:n_test], order[n_test:]

        fitted, errors = {}, {}
        for name, y in targets.items():
            heldout = Surrogate(lower, upper, alpha).fit(x[train], y[train])
            errors[name] = _rmse(heldout, x[test], y[test])
            fitted[name] = Surrogate(lower, upper, alpha).fit(x, y)

        pairs[stage] = SurrogatePair(
            stage,
            fitted["resource"],
            fitted["latency"],
            errors["resource"],
            errors["latency"],
            len(rs),
        )
        LOG.info(
            "stage %s surrogates: latency rmse %.4f, resource rmse %.4f",
            stage,
            errors["latency"],
            errors["resource"],
        )
    return pairs


@dataclass
class TuningResult:
    recommended: TuningPoint
    report: Dict[str, Any]
    optimization: Optional[OptimizationResult] = None
    finalists: List[TuningPoint] = field(default_factory=list)


def _regression(measured: Measurement, baseline: Measurement) -> float:
    """
    Largest relative per-stage latency increase over the baseline.
    """
    worst = 0.0
    for stage, base in baseline.latency_ms.items():
        value = measured.latency_ms.get(stage, 0.0)
        if base > 0:
            worst = max(worst, value / base - 1.0)
        elif value > 0:
            worst = float("inf")
    return worst


def tune(
    space: ParameterSpace,
    surrogates: Mapping[str, SurrogatePair],
    defaults: TuningPoint = None,
    finalists: int = config.FINALISTS,
    harness=None,
    budget: int = config.CMA_ES_BUDGET,
    seed: int = 0,
    slack: float = config.LATENCY_SLACK,
    strict: bool = False,
) -> TuningResult:
    """
    Minimizes the summed resource surrogates subject to every stage's latency surrogate not
    exceeding its value at the defaults, then measures the ``finalists`` best distinct
    feasible points of the solution path and the defaults on the harness. The recommendation
    is the finalist with the lowest measured cpu_cost among those whose per-stage latencies
    stay within ``slack`` of the measured defaults, or the defaults if none beats them.
    Without a harness the finalists are ranked by their surrogate objective.

    :raises AllFinalistsRegressed: only with ``strict``, if every finalist regressed
    """
    defaults = defaults if defaults is not None else space.defaults()
    space.validate(defaults)
    stages = sorted(surrogates)
    x_defaults = space.encode(defaults)
    latency_at_defaults = {s: surrogates[s].latency(x_defaults) for s in stages}

    def objective(point: TuningPoint) -> float:
        x = space.encode(point)
        return sum(surrogates[s].resource(x) for s in stages)

    def latency_constraint(stage: str):
        def g(point: TuningPoint) -> float:
            return surrogates[stage].latency(space.encode(point)) - latency_at_defaults[stage]

        return g

    LOG.info("searching %d-dimensional space with budget %d", space.dimension, budget)
    result = cma_es_constrained(
        objective,
        [latency_constraint(s) for s in stages],
        space,
        budget,
        seed=seed,
        x0=defaults,
    )

    chosen: List[TuningPoint] = []
    for entry in sorted(result.feasible_entries(), key=lambda e: (e.objective, e.evaluation)):
        if entry.point not in chosen:
            chosen.append(entry.point)
        if len(chosen) >= finalists:
            break

    def predicted(point: TuningPoint) -> Dict[str, Any]:
        x = space.encode(point)
        return {
            "objective": objective(point),
            "latency_ms": {s: surrogates[s].latency(x) for s in stages},
            "cpu_per_k": {s: surrogates[s].resource(x) for s in stages},
        }

    report: Dict[str, Any] = {
        "defaults": defaults.to_dict(),
        "slack": slack,
        "surrogates": {s: surrogates[s].to_dict() for s in stages},
        "archive": {
            "evaluations": result.evaluations,
            "size": len(result.archive),
            "feasible": len(result.feasible_entries()),
            "best_objective": result.best_objective,
        },
        "predicted_defaults": predicted(defaults),
        "finalists": [],
        "all_finalists_regressed": False,
    }

    if harness is None:
        recommended = chosen[0] if chosen else defaults
        if objective(recommended) >= objective(defaults):
            recommended = defaults
        report["finalists"] = [{"point": p.to_dict(), "surrogate": predicted(p)} for p in chosen]
        report["recommended"] = recommended.to_dict()
        report["fallback"] = recommended == defaults
        return TuningResult(recommended, report, result, chosen)

    baseline = harness.measure(defaults)
    report["measured_defaults"] = baseline.to_dict()

    best: Optional[Measurement] = None
    for point in chosen:
        measured = baseline if point == defaults else harness.measure(point)
        regression = _regression(measured, baseline)
        regressed = regression > slack
        guess = predicted(point)
        report["finalists"].append(
            {
                "point": point.to_dict(),
                "surrogate": guess,
                "measured": measured.to_dict(),
                "delta": {
                    "cpu_per_k": sum(measured.cpu_per_k.get(s, 0.0) for s in stages)
                    - guess["objective"],
                    "latency_ms": {
                        s: measured.latency_ms.get(s, 0.0) - guess["latency_ms"][s]
                        for s in stages
                    },
                },
                "latency_regression": regression,
                "regressed": regressed,
            }
        )
        if regressed:
            LOG.warning("finalist %s regressed latency by %.1f%%", point, regression * 100)
            continue
        if best is None or measured.cpu_cost < best.cpu_cost:
            best = measured

    if chosen and best is None:
        report["all_finalists_regressed"] = True
        if strict:
            raise AllFinalistsRegressed(len(chosen))
        LOG.warning("all %d finalists regressed, keeping the defaults", len(chosen))

    if best is None or best.cpu_cost >= baseline.cpu_cost:
        best = baseline
    recommended = best.point

    report["recommended"] = recommended.to_dict()
    report["fallback"] = recommended == defaults
    report["measured_recommended"] = best.to_dict()
    report["latency_regression"] = _regression(best, baseline)
    report["cpu_cost_reduction"] = (
        (baseline.cpu_cost - best.cpu_cost) / baseline.cpu_cost if baseline.cpu_cost else 0.0
    )
    LOG.info(
        "recommending %s, cpu_cost %.3f -> %.3f", recommended, baseline.cpu_cost, best.cpu_cost
    )
    return TuningResult(recommended, report, result, chosen)


def write_overlay(space: ParameterSpace, point: TuningPoint, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fd:
        json.dump(space.to_overlay(point), fd, indent=2, sort_keys=True)


def write_report(report: Mapping[str, Any], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fd:
        json.dump(report, fd, indent=2, default=str)
