import json
import os

import pytest

from rankpipe.cli import main
from rankpipe.cube import CubeSnapshot, is_done
from rankpipe.scorer import model_path
from rankpipe.workload import read_trace, trace_top_mass


@pytest.fixture
def trace_file(tmp_path):
    path = str(tmp_path / "trace.jsonl")
    code = main(
        [
            "gen-workload",
            "--key-universe", "500",
            "--duration", "5",
            "--base-rate", "10",
            "--candidates", "5",
            "--seed", "1",
            "--output", path,
        ]
    )  # fmt: skip
    assert code == 0
    return path


class TestGenWorkload:
    def test_generates_trace(self, trace_file):
        records = read_trace(trace_file)
        assert records
        assert all(len(r.candidates) == 5 for r in records)

    def test_calibrate(self, tmp_path):
        path = str(tmp_path / "trace.jsonl")
        args = ["gen-workload", "--key-universe", "1000", "--duration", "20", "--base-rate", "10"]
        code = main(args + ["--calibrate", "0.05:0.7", "--recurrence-prob", "0", "--output", path])

        assert code == 0
        assert trace_top_mass(read_trace(path), 1000, 0.05) == pytest.approx(0.7, abs=0.05)

    def test_spec_file_and_overrides(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"duration": 3.0, "candidates": 4, "key_universe": 100}))
        path = str(tmp_path / "trace.jsonl")

        args = ["gen-workload", "--spec", str(spec), "--candidates", "2", "--output", path]
        assert main(args) == 0
        assert all(len(r.candidates) == 2 for r in read_trace(path))

    def test_invalid_spec(self, tmp_path):
        path = str(tmp_path / "trace.jsonl")
        assert main(["gen-workload", "--recurrence-prob", "2", "--output", path]) == 1


class TestBuildCube:
    def test_synthetic(self, tmp_path):
        out = str(tmp_path / "models" / "gen-3")
        args = ["build-cube", "--synthetic", "--generation", "3", "--key-universe", "300"]
        code = main(args + ["--output", out])

        assert code == 0
        assert is_done(out)
        with CubeSnapshot.load(out) as snapshot:
            assert snapshot.generation == 3
            assert snapshot.key_count == 300

    def test_from_input(self, tmp_path):
        pairs = tmp_path / "pairs.jsonl"
        with open(pairs, "w") as fd:
            for i in range(20):
                doc = {"feature": f"k{i}", "embedding": [i / 10] * 4, "show": 3, "click": 1}
                fd.write(json.dumps(doc) + "\n")
        out = str(tmp_path / "cube")

        code = main(
            [
                "build-cube",
                "--input", str(pairs),
                "--random-models",
                "--shards", "2",
                "--placement", "memory-first:5",
                "--output", out,
            ]
        )  # fmt: skip

        assert code == 0
        assert is_done(out)
        assert os.path.isfile(model_path(out, "dnn_ctr"))
        with CubeSnapshot.load(out) as snapshot:
            assert snapshot.key_count == 20
            assert snapshot.embedding_dim == 4

    def test_needs_an_input(self, tmp_path):
        assert main(["build-cube", "--output", str(tmp_path / "cube")]) == 1

    def test_unknown_placement(self, tmp_path):
        args = ["build-cube", "--synthetic", "--placement", "tape", "--output", str(tmp_path)]
        assert main(args) == 1


class TestReplay:
    def test_in_process(self, tmp_path, trace_file):
        root = tmp_path / "models"
        gen = str(root / "gen-1")
        assert main(["build-cube", "--synthetic", "--key-universe", "500", "--output", gen]) == 0
        summary = str(tmp_path / "summary.json")

        code = main(
            [
                "replay",
                "--trace", trace_file,
                "--model-root", str(root),
                "--no-cube-cache",
                "--output", summary,
            ]
        )  # fmt: skip

        assert code == 0
        with open(summary) as fd:
            doc = json.load(fd)
        assert doc["completed"] == len(read_trace(trace_file))
        assert doc["failed"] == 0

    def test_missing_model_root(self, tmp_path, trace_file):
        args = ["replay", "--trace", trace_file, "--model-root", str(tmp_path / "nope")]
        assert main(args) == 1

    def test_empty_model_root(self, tmp_path, trace_file):
        assert main(["replay", "--trace", trace_file, "--model-root", str(tmp_path)]) == 2

    def test_missing_trace(self, tmp_path):
        args = ["replay", "--trace", str(tmp_path / "nope.jsonl"), "--model-root", str(tmp_path)]
        assert main(args) == 2


class TestTrainShedder:
    def test_needs_logs_or_trace(self, tmp_path):
        assert main(["train-shedder", "--output", str(tmp_path / "p.bin")]) == 1

    def test_trace_needs_capacity(self, tmp_path, trace_file):
        args = ["train-shedder", "--trace", trace_file, "--output", str(tmp_path / "p.bin")]
        assert main(args) == 1

    def test_too_few_records(self, tmp_path, trace_file):
        args = [
            "train-shedder",
            "--trace", trace_file,
            "--capacity-rps", "10",
            "--slate-size", "3",
            "--output", str(tmp_path / "p.bin"),
        ]  # fmt: skip
        assert main(args) == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--version"])
    assert e.value.code == 0
    assert "rankpipe" in capsys.readouterr().out
