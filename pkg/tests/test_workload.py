import collections

import numpy as np
import pytest

from rankpipe.errors import ConfigError
from rankpipe.service import ScoringService
from rankpipe.workload import (
    DEFAULT_DIURNAL_PROFILE,
    PipelineUnavailable,
    TraceError,
    Unachievable,
    WorkloadSpec,
    calibrate_zipf,
    generate,
    load_correlation,
    read_trace,
    recurrence_fraction,
    replay,
    trace_top_mass,
    write_trace,
    zipf_mass,
)

from utils import KEY_UNIVERSE

FLAT = [1.0] * 24


def small_spec(**kwargs):
    doc = dict(
        key_universe=KEY_UNIVERSE,
        duration=30.0,
        base_rate=20.0,
        diurnal_profile=FLAT,
        candidates=8,
        seed=4,
    )
    doc.update(kwargs)
    return WorkloadSpec(**doc)


class TestWorkloadSpec:
    @pytest.mark.parametrize(
        "changes",
        [
            {"recurrence_prob": 1.5},
            {"feedback_fraction": -0.1},
            {"diurnal_profile": [1.0] * 23},
            {"diurnal_profile": [0.0] * 24},
            {"zipf_exponent": -1.0},
            {"candidates": 0},
            {"base_rate": 0.0},
        ],
    )
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            small_spec(**changes).validate()

    def test_from_dict(self):
        spec = WorkloadSpec.from_dict({"duration": 10.0, "seed": 3})
        assert spec.duration == 10.0
        assert spec.to_dict()["diurnal_profile"] == list(DEFAULT_DIURNAL_PROFILE)

        with pytest.raises(ConfigError):
            WorkloadSpec.from_dict({"durration": 10.0})

    def test_load(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text('{"duration": 12.5}')
        assert WorkloadSpec.load(str(path)).duration == 12.5

        path.write_text("{")
        with pytest.raises(ConfigError):
            WorkloadSpec.load(str(path))
        with pytest.raises(ConfigError):
            WorkloadSpec.load(str(tmp_path / "missing.json"))

    def test_rate_averages_to_base_rate(self):
        spec = WorkloadSpec(base_rate=10.0, day_length=24.0)
        rates = [spec.rate(h + 0.5) for h in range(24)]
        assert np.mean(rates) == pytest.approx(10.0)
        assert max(rates) == spec.rate(21.5)


class TestZipf:
    def test_calibration(self):
        exponent = calibrate_zipf(10_000, 0.01, 0.8)
        mass = zipf_mass(exponent, 10_000, 0.01)
        assert 0.8 <= mass <= 0.805

    def test_uniform_is_enough(self):
        assert calibrate_zipf(1000, 0.5, 0.3) == 0.0

    def test_unachievable(self):
        with pytest.raises(Unachievable):
            calibrate_zipf(1000, 0.01, 1.0)

    @pytest.mark.parametrize(
        "args", [(1, 0.5, 0.5), (1000, 0.0, 0.5), (1000, 1.0, 0.5), (1000, 0.1, 0.0)]
    )
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            calibrate_zipf(*args)

    def test_trace_follows_the_calibrated_law(self):
        exponent = calibrate_zipf(KEY_UNIVERSE, 0.05, 0.7)
        records = generate(small_spec(zipf_exponent=exponent, recurrence_prob=0.0))
        assert trace_top_mass(records, KEY_UNIVERSE, 0.05) == pytest.approx(0.7, abs=0.03)


class TestGenerate:
    def test_deterministic(self):
        a = [r.to_dict() for r in generate(small_spec())]
        b = [r.to_dict() for r in generate(small_spec())]
        c = [r.to_dict() for r in generate(small_spec(seed=5))]
        assert a == b
        assert a != c

    def test_shape(self):
        spec = small_spec()
        records = generate(spec)

        assert 450 <= len(records) <= 750
        timestamps = [r.timestamp for r in records]
        assert timestamps == sorted(timestamps)
        assert timestamps[-1] < spec.duration
        for record in records[:50]:
            assert len(record.candidates) == 8
            assert len({c.item for c in record.candidates}) == 8
            assert set(record.user_features) == set(spec.user_groups)
            assert all(0.0 <= c.escore <= 1.0 for c in record.candidates)

    def test_recurrence(self):
        spec = small_spec(recurrence_prob=0.6, recurrence_window=10.0)
        records = generate(spec)
        assert recurrence_fraction(records, 10.0) == pytest.approx(0.6, abs=0.06)

        fresh = generate(small_spec(recurrence_prob=0.0))
        assert recurrence_fraction(fresh, 10.0) < 0.01

    def test_diurnal_arrivals(self):
        spec = small_spec(
            diurnal_profile=DEFAULT_DIURNAL_PROFILE, day_length=24.0, duration=240.0, candidates=2
        )
        counts = collections.Counter(int(r.timestamp) % 24 for r in generate(spec))
        correlation = np.corrcoef([counts[h] for h in range(24)], DEFAULT_DIURNAL_PROFILE)
        assert correlation[0, 1] > 0.9

    def test_feedback(self):
        records = generate(small_spec(feedback_fraction=0.5))
        with_feedback = [r for r in records if r.feedback]
        assert 0.35 * len(records) <= len(with_feedback) <= 0.65 * len(records)
        for record in with_feedback:
            (event,) = record.feedback
            assert event.user == record.user
            assert event.item in {c.item for c in record.candidates}
            assert event.timestamp >= record.timestamp


class TestLoadCorrelation:
    def test_correlated(self):
        timestamps, values = [], []
        for bucket, count in enumerate([2, 5, 9, 4, 7]):
            timestamps += [bucket + i / 10 for i in range(count)]
            values += [count * 0.1] * count
        assert load_correlation(timestamps, values, 1.0) == pytest.approx(1.0)

    def test_degenerate(self):
        assert load_correlation([0.1, 0.2, 1.5], [0.3, 0.3, 0.3], 1.0) == 0.0
        assert load_correlation([0.1, 0.2], [0.1, 0.9], 1.0) == 0.0


class TestTrace:
    def test_write_and_read(self, tmp_path):
        records = generate(small_spec(duration=5.0, feedback_fraction=0.3))
        path = str(tmp_path / "trace.jsonl")
        assert write_trace(records, path) == len(records)
        assert read_trace(path) == records

    def test_decreasing_timestamps(self, tmp_path):
        records = generate(small_spec(duration=5.0))
        path = str(tmp_path / "trace.jsonl")
        write_trace([records[1], records[0]], path)

        with pytest.raises(TraceError) as e:
            read_trace(path)
        assert e.value.line == 2

    def test_invalid_record(self, tmp_path):
        path = tmp_path / "trace.jsonl"
        path.write_text('{"timestamp": 1.0, "user": "u1"}\n\n{"user": "u2"}\n')
        with pytest.raises(TraceError) as e:
            read_trace(str(path))
        assert e.value.line == 3


class Unready:
    def health(self):
        return {"ready": False}


class Unreachable:
    def health(self):
        raise ConnectionError("refused")


class TestReplay:
    def test_against_service(self, service_config):
        records = generate(small_spec(duration=5.0, feedback_fraction=0.2))

        with ScoringService(service_config) as service:
            result = replay(records, service, keep_responses=True)

        assert result.completed == len(records)
        assert result.failed == 0
        assert result.served_pairs == 8 * len(records)
        assert [r.request_id for r in result.responses] == [f"t{i}" for i in range(len(records))]

        summary = result.summary()
        assert set(summary) >= {"requests", "completed", "throughput", "latency_ms", "cache"}
        assert summary["latency_ms"]["p50"] <= summary["latency_ms"]["p99"]
        assert summary["latency_histogram"]["le_inf"] == len(records)
        assert "cube_hit_ratio" in summary["cache"]
        assert set(summary["cache"]["query_hit_ratio"]) == {"dnn_ctr"}

    def test_paced(self, service_config):
        records = generate(small_spec(duration=2.0))
        with ScoringService(service_config) as service:
            result = replay(records, service, speed_multiplier=4.0)
        assert result.wall_seconds >= (records[-1].timestamp - records[0].timestamp) / 4.0

    def test_failures_are_counted(self, service_config):
        records = generate(small_spec(duration=2.0))
        records[0].user_features = {"no_such_group": ["k1"]}

        with ScoringService(service_config) as service:
            result = replay(records, service)

        assert result.failed == 1
        assert result.completed == len(records) - 1
        assert sum(result.errors.values()) == 1

    @pytest.mark.parametrize("target", [Unready(), Unreachable()])
    def test_unavailable(self, target):
        with pytest.raises(PipelineUnavailable):
            replay(generate(small_spec(duration=1.0)), target)
