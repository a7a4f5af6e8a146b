import math

import numpy as np
import pytest

from rankpipe.cube import DimensionMismatch, SparseParameter
from rankpipe.scorer import (
    DenseModel,
    FeatureSlotSpec,
    Layer,
    ModelFormatError,
    UnknownGroup,
    assemble,
    forward,
    load,
    model_path,
    random_model,
    save,
)

SLOTS = FeatureSlotSpec(["user", "item"], {"item": "mean"})


def naive_forward(model, x):
    """
    Reference forward pass with explicit loops.
    """
    values = [float(v) for v in x]
    for layer in model.layers:
        n_in, n_out = layer.weight.shape
        out = []
        for j in range(n_out):
            s = float(layer.bias[j])
            for i in range(n_in):
                s += values[i] * float(layer.weight[i, j])
            if layer.activation == "relu":
                s = max(s, 0.0)
            elif layer.activation == "sigmoid":
                s = 1.0 / (1.0 + math.exp(-s))
            out.append(s)
        values = out
    return values[0]


class TestAssemble:
    def test_sum_and_mean_combiners(self):
        params = {
            1: SparseParameter([1.0, 2.0]),
            2: SparseParameter([3.0, 4.0]),
            3: SparseParameter([10.0, 20.0]),
        }
        vector = assemble({"user": [1, 2], "item": [3, 99]}, SLOTS, params, 2)
        # 99 has no value: contributes zero but still counts for the mean
        np.testing.assert_allclose(vector, [4.0, 6.0, 5.0, 10.0])

    def test_missing_group_is_zero(self):
        vector = assemble({"user": [1]}, SLOTS, {1: SparseParameter([1.0, 1.0])}, 2)
        np.testing.assert_allclose(vector, [1.0, 1.0, 0.0, 0.0])

    def test_unknown_group(self):
        with pytest.raises(UnknownGroup) as e:
            assemble({"other": [1]}, SLOTS, {}, 2)
        assert e.value.group == "other"

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            assemble({"user": [1]}, SLOTS, {1: SparseParameter([1.0])}, 2)


class TestForward:
    def test_matches_naive_forward(self):
        model = random_model("m", SLOTS, 4, hidden=(8, 4), seed=3)
        x = np.random.default_rng(0).normal(size=(16, model.input_dim))

        scores = forward(model, x)
        assert scores.shape == (16,)
        for row, score in zip(x, scores):
            assert score == pytest.approx(naive_forward(model, row), rel=1e-9)
        assert np.all((scores >= 0) & (scores <= 1))

    def test_scores_do_not_depend_on_the_batch(self):
        model = random_model("m", FeatureSlotSpec(["a", "b", "c"]), 16, hidden=(64, 32), seed=5)
        x = np.random.default_rng(1).normal(size=(64, model.input_dim))

        batched = forward(model, x)
        for i in range(len(x)):
            assert batched[i] == forward(model, x[i])
            assert batched[i] == forward(model, x[i : i + 3])[0]
            assert batched[i] == forward(model, x[::-1])[len(x) - 1 - i]

    def test_single_vector_and_counting(self):
        model = random_model("m", SLOTS, 4, seed=1)
        x = np.ones(model.input_dim)
        assert float(forward(model, x)) == pytest.approx(naive_forward(model, x))
        forward(model, np.ones((3, model.input_dim)))
        assert model.pairs_forwarded == 4

    def test_input_dimension_checked(self):
        model = random_model("m", SLOTS, 4)
        with pytest.raises(DimensionMismatch):
            forward(model, np.ones(5))

    def test_output_layer_must_be_sigmoid(self):
        with pytest.raises(ValueError):
            DenseModel("m", 1, 1, FeatureSlotSpec(["a"]), [Layer([[1.0]], [0.0], "relu")])


class TestModelFile:
    def test_save_and_load(self, tmp_path):
        model = random_model("dnn_ctr", SLOTS, 4, generation=5, seed=2)
        path = model_path(str(tmp_path), "dnn_ctr")
        assert path.endswith("dense_dnn_ctr.bin")
        save(model, path)

        loaded = load(path)
        assert loaded.name == "dnn_ctr"
        assert loaded.generation == 5
        assert loaded.slots == SLOTS
        x = np.random.default_rng(1).normal(size=(4, model.input_dim))
        np.testing.assert_array_equal(forward(loaded, x), forward(model, x))

    def test_truncated_file(self, tmp_path):
        path = str(tmp_path / "dense_m.bin")
        save(random_model("m", SLOTS, 4), path)
        with open(path, "r+b") as fd:
            fd.truncate(fd.seek(0, 2) - 8)

        with pytest.raises(ModelFormatError):
            load(path)

    def test_non_finite_weights(self, tmp_path):
        path = str(tmp_path / "dense_m.bin")
        save(random_model("m", SLOTS, 4), path)
        with open(path, "r+b") as fd:
            fd.seek(-4, 2)
            fd.write(np.array([np.nan], dtype="<f4").tobytes())

        with pytest.raises(ModelFormatError):
            load(path)
