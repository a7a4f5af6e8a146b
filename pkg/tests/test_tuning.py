import json

import numpy as np
import pytest

from rankpipe.shedding import InsufficientData
from rankpipe.space import ParameterDescriptor, ParameterSpace, PointOutOfRange, default_space
from rankpipe.stages import serving_pipeline
from rankpipe.tuning import (
    DEFAULT_COST_PROFILE,
    AllFinalistsRegressed,
    HarnessFailure,
    Measurement,
    PipelineHarness,
    StageLogRecord,
    Surrogate,
    collect_logs,
    desk_allocator_model,
    fit_surrogates,
    read_logs,
    run_plan,
    tune,
    write_logs,
    write_overlay,
)
from rankpipe.workload import WorkloadSpec, generate

from utils import KEY_UNIVERSE


def planted_space():
    return ParameterSpace(
        [
            ParameterDescriptor("p", "continuous", 5.0, 0.0, 10.0, target="cache.p"),
            ParameterDescriptor("q", "continuous", 5.0, 0.0, 10.0, target="cache.q"),
        ]
    )


class PlantedHarness:
    """
    One stage whose CPU use is minimal at p=8, q=2 and whose latency grows with p, so the
    latency constraint holds the optimum at p=5.
    """

    stages = ["s"]

    def __init__(self, space):
        self.space = space
        self.calls = 0

    def cpu(self, point):
        return (point["p"] - 8.0) ** 2 / 16 + (point["q"] - 2.0) ** 2 / 16 + 1.0

    def latency(self, point):
        return 1.0 + point["p"] / 10

    def measure(self, point):
        self.calls += 1
        cpu = self.cpu(point)
        return Measurement(point, {"s": self.latency(point)}, {"s": cpu}, cpu, 100.0)


class FlatCostHarness(PlantedHarness):
    def cpu(self, point):
        return 5.0


class SlowOffDefaultsHarness(PlantedHarness):
    def latency(self, point):
        return 1.5 if point == self.space.defaults() else 10.0


class FailingHarness(PlantedHarness):
    def measure(self, point):
        if point["p"] > 5.0:
            raise HarnessFailure(point, "boom")
        return super().measure(point)


@pytest.fixture(scope="module")
def planted():
    space = planted_space()
    harness = PlantedHarness(space)
    logs = collect_logs(harness, run_plan(space, 150, seed=0))
    return space, fit_surrogates(logs, space)


class TestStageLogs:
    def test_negative_values(self):
        point = planted_space().defaults()
        with pytest.raises(ValueError):
            StageLogRecord("s", point, -1.0, 1.0)
        with pytest.raises(ValueError):
            StageLogRecord("s", point, 1.0, -1.0)

    def test_write_and_read(self, tmp_path):
        space = planted_space()
        logs = collect_logs(PlantedHarness(space), run_plan(space, 5))
        path = str(tmp_path / "logs.jsonl")
        write_logs(logs, path)
        assert read_logs(path) == logs


class TestCollectLogs:
    def test_one_record_per_stage_and_run(self):
        space = planted_space()
        harness = PlantedHarness(space)
        plan = run_plan(space, 9, seed=1)

        logs = collect_logs(harness, plan, repetitions=2)

        assert plan[0] == space.defaults()
        assert len(logs) == 20
        assert harness.calls == 20
        assert {r.stage for r in logs} == {"s"}

    def test_plan_is_validated_before_running(self):
        space = planted_space()
        harness = PlantedHarness(space)
        plan = [space.defaults(), space.defaults().replace(p=11.0)]

        with pytest.raises(PointOutOfRange):
            collect_logs(harness, plan)
        assert harness.calls == 0

    def test_failed_points_are_skipped(self):
        space = planted_space()
        plan = [space.defaults(), space.defaults().replace(p=9.0), space.defaults()]

        logs = collect_logs(FailingHarness(space), plan)
        assert len(logs) == 2

        with pytest.raises(HarnessFailure):
            collect_logs(FailingHarness(space), plan, skip_failures=False)


class TestFitSurrogates:
    def test_quality(self, planted):
        space, surrogates = planted
        pair = surrogates["s"]
        assert pair.records == 151
        assert pair.latency_rmse < 0.05
        assert pair.resource_rmse < 0.3

        x = space.encode(space.defaults())
        assert pair.latency(x) == pytest.approx(1.5, abs=0.05)
        assert pair.resource(x) == pytest.approx(2.125, abs=0.1)

    def test_insufficient_data(self):
        space = planted_space()
        logs = collect_logs(PlantedHarness(space), run_plan(space, 9))

        with pytest.raises(InsufficientData) as e:
            fit_surrogates(logs, space)
        assert e.value.have == 10
        assert e.value.need == 20

        with pytest.raises(InsufficientData):
            fit_surrogates([], space)

    def test_ridge_recovers_planted_slopes(self):
        space = planted_space()
        x = np.random.default_rng(4).uniform(0.0, 10.0, size=(200, 2))
        y = 3.0 + 0.4 * x[:, 0] - 0.2 * x[:, 1]

        model = Surrogate(space.lower, space.upper).fit(x, y)

        # encodings are scaled to the unit box: slopes grow by the span of 10
        np.testing.assert_allclose(model.coef[:3], [3.0, 4.0, -2.0], atol=1e-3)
        np.testing.assert_allclose(model.coef[3:], 0.0, atol=1e-3)
        assert model.ridge(np.array([[2.5, 7.5]]))[0] == pytest.approx(2.5, abs=1e-3)


class TestTune:
    def test_without_harness(self, planted):
        space, surrogates = planted
        result = tune(space, surrogates, budget=600, seed=1)

        assert not result.report["fallback"]
        assert result.recommended["p"] <= 5.5
        assert result.recommended["q"] == pytest.approx(2.0, abs=1.0)
        assert len(result.finalists) == 5
        assert result.report["archive"]["evaluations"] <= 600

    def test_with_harness(self, planted):
        space, surrogates = planted
        harness = PlantedHarness(space)

        result = tune(space, surrogates, harness=harness, budget=600, seed=1)
        report = result.report

        assert not report["fallback"]
        assert report["latency_regression"] <= 0.05
        assert report["cpu_cost_reduction"] >= 0.15
        assert report["measured_defaults"]["cpu_cost"] == 2.125
        assert len(report["finalists"]) == 5
        for finalist in report["finalists"]:
            assert set(finalist) >= {"point", "surrogate", "measured", "delta", "regressed"}
        json.dumps(report)

    def test_falls_back_when_nothing_is_cheaper(self, planted):
        space, surrogates = planted
        result = tune(space, surrogates, harness=FlatCostHarness(space), budget=300)

        assert result.recommended == space.defaults()
        assert result.report["fallback"]
        assert result.report["cpu_cost_reduction"] == 0.0

    def test_all_finalists_regressed(self, planted):
        space, surrogates = planted
        harness = SlowOffDefaultsHarness(space)

        result = tune(space, surrogates, harness=harness, budget=300)
        assert result.recommended == space.defaults()
        assert result.report["all_finalists_regressed"]
        assert all(f["regressed"] for f in result.report["finalists"])

        with pytest.raises(AllFinalistsRegressed):
            tune(space, surrogates, harness=harness, budget=300, strict=True)

    def test_defaults_must_be_in_space(self, planted):
        space, surrogates = planted
        with pytest.raises(PointOutOfRange):
            tune(space, surrogates, defaults=space.defaults().replace(q=-1.0), budget=50)

    def test_write_overlay(self, planted, tmp_path):
        space, _ = planted
        path = tmp_path / "overlay.json"
        write_overlay(space, space.defaults().replace(p=4.0), str(path))
        assert json.loads(path.read_text()) == {"cache": {"p": 4.0, "q": 5.0}}


class TestDeskAllocatorModel:
    def test_more_arenas_are_cheaper(self):
        knobs = {"arenas": 500, "max_active_extent": 6, "huge_page": "Default"}
        assert desk_allocator_model(dict(knobs, arenas=700)) < desk_allocator_model(knobs)
        assert desk_allocator_model(dict(knobs, huge_page="Always")) < desk_allocator_model(knobs)
        assert desk_allocator_model({"arenas": 700, "max_active_extent": 5}) == 1.0


class TestPipelineHarness:
    def test_measure_defaults(self, service_config):
        space = default_space()
        trace = generate(
            WorkloadSpec(
                key_universe=KEY_UNIVERSE,
                duration=5.0,
                base_rate=8.0,
                diurnal_profile=[1.0] * 24,
                candidates=10,
            )
        )
        harness = PipelineHarness(
            serving_pipeline(costs=DEFAULT_COST_PROFILE), service_config, trace, space
        )
        assert harness.stages == ["cube", "dnn", "item_extractor", "item_processor", "user"]

        m = harness.measure(space.defaults())

        assert set(m.latency_ms) == set(harness.stages)
        assert all(v > 0 for v in m.latency_ms.values())
        assert all(v >= 0 for v in m.cpu_per_k.values())
        assert m.cpu_cost > 0

    def test_empty_trace(self, service_config):
        with pytest.raises(ValueError):
            PipelineHarness(serving_pipeline(), service_config, [], default_space())
