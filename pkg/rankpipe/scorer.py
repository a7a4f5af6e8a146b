"""
Dense scoring: assembling sparse embeddings into a dense input vector and running the
feed-forward network on it.

A dense model is stored as ``dense_<name>.bin`` next to the cube manifest of its generation::

    [header_length: u32][header: UTF-8 JSON][row-major f32 weights and biases, layer by layer]

The header carries the model name, generation, embedding dimension, feature slots and the
shape and activation of every layer.
"""
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .cube import DimensionMismatch, SparseParameter
from .errors import RankpipeError

LOG = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sigmoid", "identity")
COMBINERS = ("sum", "mean")

_HEADER = struct.Struct("<I")


class UnknownGroup(RankpipeError):
    def __init__(self, group: str) -> None:
        self.group = group
        super().__init__(f"unknown feature group {group}")


class ModelFormatError(RankpipeError):
    def __init__(self, path: str, reason: str) -> None:
        self.path = path
        super().__init__(f"invalid dense model {path}: {reason}")


@dataclass(frozen=True)
class FeatureSlotSpec:
    groups: Sequence[str]
    combiners: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        if len(set(self.groups)) != len(self.groups):
            raise ValueError("feature groups must be unique")
        for group, combiner in self.combiners.items():
            if combiner not in COMBINERS:
                raise ValueError(f"unknown combiner {combiner} for group {group}")

    def combiner(self, group: str) -> str:
        return self.combiners.get(group, "sum")

    def to_dict(self) -> Dict:
        return {"groups": list(self.groups), "combiners": dict(self.combiners)}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "FeatureSlotSpec":
        return cls(doc["groups"], doc.get("combiners", {}))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -500.0, 500.0)))


def _activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0.0)
    if activation == "sigmoid":
        return _sigmoid(x)
    return x


def _affine(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # fixed accumulation order: a row's result is independent of the rest of its batch
    out = np.repeat(bias[np.newaxis, :], x.shape[0], axis=0)
    for j in range(weight.shape[0]):
        out += x[:, j : j + 1] * weight[j]
    return out


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype="<f4")
        self.bias = np.asarray(self.bias, dtype="<f4")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"bias shape {self.bias.shape} does not fit {self.weight.shape}")


class DenseModel:
    """
    An immutable multi-layer perceptron producing one relevance score in [0, 1] per input.
    """

    name: str
    generation: int
    embedding_dim: int
    slots: FeatureSlotSpec
    layers: List[Layer]

    def __init__(
        self,
        name: str,
        generation: int,
        embedding_dim: int,
        slots: FeatureSlotSpec,
        layers: List[Layer],
    ) -> None:
        if not layers:
            raise ValueError("a dense model needs at least one layer")
        if layers[0].weight.shape[0] != len(slots.groups) * embedding_dim:
            raise DimensionMismatch(len(slots.groups) * embedding_dim, layers[0].weight.shape[0])
        for prev, layer in zip(layers, layers[1:]):
            if prev.weight.shape[1] != layer.weight.shape[0]:
                raise DimensionMismatch(prev.weight.shape[1], layer.weight.shape[0])
        if layers[-1].weight.shape[1] != 1 or layers[-1].activation != "sigmoid":
            raise ValueError("the output layer must produce one sigmoid score")
        for layer in layers:
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValueError("model weights must be finite")

        self.name = name
        self.generation = generation
        self.embedding_dim = embedding_dim
        self.slots = slots
        self.layers = layers
        # computation runs in float64 over the stored float32 weights
        self._compute = [
            (l.weight.astype(np.float64), l.bias.astype(np.float64), l.activation) for l in layers
        ]
        self._lock = threading.Lock()
        self._forwarded = 0

    @property
    def input_dim(self) -> int:
        return int(self.layers[0].weight.shape[0])

    @property
    def pairs_forwarded(self) -> int:
        return self._forwarded

    def _count(self, n: int) -> None:
        with self._lock:
            self._forwarded += n

    def __str__(self):
        shapes = "x".join(str(l.weight.shape[1]) for l in self.layers)
        return f"DenseModel({self.name}, generation={self.generation}, {self.input_dim}x{shapes})"

    def __repr__(self):
        return self.__str__()


def assemble(
    request_features: Mapping[str, Sequence[int]],
    slots: FeatureSlotSpec,
    params: Mapping[int, Optional[SparseParameter]],
    embedding_dim: int,
) -> np.ndarray:
    """
    Concatenates the combined embeddings of every slot into one dense input vector.

    :param request_features: feature group name -> signatures of the group's features
    :param slots: the model's feature slots
    :param params: signature -> looked-up parameter, or None if the cube has no value
    :param embedding_dim: the embedding dimension of the cube
    :raises UnknownGroup: if the request references a group the slots do not define
    """
    for group in request_features:
        if group not in slots.groups:
            raise UnknownGroup(group)

    vector = np.zeros(len(slots.groups) * embedding_dim, dtype=np.float64)
    for i, group in enumerate(slots.groups):
        signatures = request_features.get(group) or ()
        if not signatures:
            continue
        acc = np.zeros(embedding_dim, dtype=np.float64)
        for signature in signatures:
            param = params.get(signature)
            if param is None:
                continue
            if param.dim != embedding_dim:
                raise DimensionMismatch(embedding_dim, param.dim)
            acc += param.embedding
        if slots.combiner(group) == "mean":
            acc /= len(signatures)
        vector[i * embedding_dim : (i + 1) * embedding_dim] = acc
    return vector


def forward(model: DenseModel, inputs: np.ndarray) -> np.ndarray:
    """
    Runs the model on one input vector (returns a 0-d array) or a batch of row vectors
    (returns one score per row).

    :raises DimensionMismatch: if the input width differs from the model's input dimension
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[np.newaxis, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionMismatch(model.input_dim, x.shape[-1] if x.ndim else 0)

    for weight, bias, activation in model._compute:
        x = _activate(_affine(x, weight, bias), activation)

    model._count(x.shape[0])
    scores = x[:, 0]
    return scores[0] if single else scores


def random_model(
    name: str,
    slots: FeatureSlotSpec,
    embedding_dim: int,
    hidden: Sequence[int] = (32, 16),
    generation: int = 1,
    seed: int = 0,
    output_bias: float = 0.0,
) -> DenseModel:
    """
    Draws a relu MLP with a sigmoid output and He-scaled normal weights. ``output_bias``
    shifts the score distribution.
    """
    rng = np.random.default_rng(seed)
    widths = [len(slots.groups) * embedding_dim, *hidden, 1]
    layers = []
    for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
        last = i == len(widths) - 2
        weight = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        bias = np.full(n_out, output_bias) if last else np.zeros(n_out)
        layers.append(Layer(weight, bias, "sigmoid" if last else "relu"))
    return DenseModel(name, generation, embedding_dim, slots, layers)


def model_path(directory: str, name: str) -> str:
    return os.path.join(directory, f"dense_{name}.bin")


def save(model: DenseModel, path: str) -> None:
    header = {
        "name": model.name,
        "generation": model.generation,
        "embedding_dim": model.embedding_dim,
        "slots": model.slots.to_dict(),
        "layers": [
            {"shape": list(l.weight.shape), "activation": l.activation} for l in model.layers
        ],
    }
    encoded = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fd:
        fd.write(_HEADER.pack(len(encoded)))
        fd.write(encoded)
        for layer in model.layers:
            fd.write(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
            fd.write(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())


def load(path: str) -> DenseModel:
    """
    Reads a dense model file.

    :raises ModelFormatError: if the file is truncated, malformed or holds non-finite weights
    """
    with open(path, "rb") as fd:
        raw = fd.read()

    try:
        (length,) = _HEADER.unpack_from(raw, 0)
        header = json.loads(raw[_HEADER.size : _HEADER.size + length].decode("utf-8"))
        data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size + length)

        layers = []
        pos = 0
        for spec in header["layers"]:
            n_in, n_out = spec["shape"]
            weight = data[pos : pos + n_in * n_out].reshape(n_in, n_out)
            pos += n_in * n_out
            bias = data[pos : pos + n_out]
            pos += n_out
            if bias.shape != (n_out,):
                raise ValueError("truncated weights")
            layers.append(Layer(weight.copy(), bias.copy(), spec["activation"]))
        if pos != len(data):
            raise ValueError(f"{len(data) - pos} trailing values")

        return DenseModel(
            header["name"],
            int(header["generation"]),
            int(header["embedding_dim"]),
            FeatureSlotSpec.from_dict(header["slots"]),
            layers,
        )
    except (struct.error, ValueError, KeyError, TypeError, DimensionMismatch) as e:
        raise ModelFormatError(path, str(e))
