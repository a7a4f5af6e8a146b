"""
A model generation is one cube directory together with the dense models written into it.
``ModelStore`` serves the current generation through a double buffer and hot-reloads newer
ones.
"""
import glob
import itertools
import logging
import os
import threading
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import config
from .cube import (
    CubeManifest,
    CubeSnapshot,
    PlacementPolicy,
    SparseParameter,
    StaleGeneration,
    VerificationFailed,
    all_memory,
    build,
    hot_reload,
    mark_done,
)
from .reload import DoubleBuffer, Lease, ModelWatcher, latest_generation
from .scorer import DenseModel, FeatureSlotSpec, ModelFormatError, load, model_path, random_model
from .scorer import save as save_model

LOG = logging.getLogger(__name__)

USER_GROUPS = ("u_profile", "u_interest", "u_history", "u_context", "u_device")
ITEM_GROUPS = ("i_category", "i_tag", "i_author", "i_stats", "i_freshness", "i_region")
FEATURE_GROUPS = USER_GROUPS + ITEM_GROUPS

# three objectives; any two share at least 9 of the 11 groups either of them reads
DEFAULT_MODELS: Dict[str, FeatureSlotSpec] = {
    "dnn_ctr": FeatureSlotSpec(FEATURE_GROUPS, {"u_history": "mean", "i_tag": "mean"}),
    "dnn_fr": FeatureSlotSpec(
        [g for g in FEATURE_GROUPS if g != "i_stats"], {"u_history": "mean", "i_tag": "mean"}
    ),
    "dnn_cmt": FeatureSlotSpec([g for g in FEATURE_GROUPS if g != "u_history"], {"i_tag": "mean"}),
}


def group_overlap(models: Mapping[str, FeatureSlotSpec]) -> float:
    """
    The smallest Jaccard overlap of the feature group sets of any two models; 1 for fewer
    than two models.
    """
    groups = [set(slots.groups) for slots in models.values()]
    return min(
        (len(a & b) / len(a | b) for a, b in itertools.combinations(groups, 2)), default=1.0
    )


class ModelGeneration:
    """
    An immutable generation: the cube snapshot and the dense models keyed by name.
    """

    def __init__(self, directory: str, snapshot: CubeSnapshot, models: Dict[str, DenseModel]):
        self.directory = directory
        self.snapshot = snapshot
        self.models = models

    @property
    def generation(self) -> int:
        return self.snapshot.generation

    @property
    def known_groups(self) -> frozenset:
        return frozenset(g for m in self.models.values() for g in m.slots.groups)

    def model(self, name: str) -> DenseModel:
        try:
            return self.models[name]
        except KeyError:
            raise KeyError(f"generation {self.generation} has no model {name}")

    @classmethod
    def load(cls, directory: str, current: "ModelGeneration" = None) -> "ModelGeneration":
        """
        Loads and verifies a generation directory.

        :param current: the serving generation, if any; the new one must be newer
        :raises StaleGeneration: if the generation does not exceed the current one
        :raises VerificationFailed: if the cube or a dense model does not verify
        """
        snapshot = hot_reload(current.snapshot if current else None, directory)
        try:
            models = {}
            for path in sorted(glob.glob(os.path.join(directory, "dense_*.bin"))):
                model = load(path)
                if model.generation != snapshot.generation:
                    raise VerificationFailed(
                        directory,
                        f"model {model.name} is generation {model.generation}, "
                        f"cube is {snapshot.generation}",
                    )
                if model.embedding_dim != snapshot.embedding_dim:
                    raise VerificationFailed(
                        directory, f"model {model.name} embedding dim does not match the cube"
                    )
                models[model.name] = model
            if not models:
                raise VerificationFailed(directory, "no dense model in generation directory")
        except ModelFormatError as e:
            snapshot.close()
            raise VerificationFailed(directory, str(e))
        except Exception:
            snapshot.close()
            raise

        return cls(directory, snapshot, models)

    def close(self) -> None:
        self.snapshot.close()

    def __str__(self):
        return f"ModelGeneration({self.generation}, models={sorted(self.models)})"

    def __repr__(self):
        return self.__str__()


class ModelStore:
    """
    Serves one model generation at a time. Requests lease the current generation for their
    whole lifetime; ``reload`` publishes a newer verified generation and retires the old one
    after its last lease is released.
    """

    def __init__(self, generation: ModelGeneration) -> None:
        self._buffer: DoubleBuffer[ModelGeneration] = DoubleBuffer(
            generation, on_retire=self._retire
        )
        self._reload_lock = threading.Lock()
        self._listeners: List[Callable[[ModelGeneration], None]] = []
        self._watcher: Optional[ModelWatcher] = None
        self.reloads = 0

    @classmethod
    def open(cls, model_dir_root: str) -> "ModelStore":
        """
        Loads the highest complete generation below the root.

        :raises VerificationFailed: if there is none, or it does not verify
        """
        directory = latest_generation(model_dir_root)
        if directory is None:
            raise VerificationFailed(model_dir_root, "no complete model generation found")
        return cls(ModelGeneration.load(directory))

    @property
    def current(self) -> ModelGeneration:
        return self._buffer.current

    @property
    def generation(self) -> int:
        return self._buffer.current.generation

    def acquire(self) -> Lease[ModelGeneration]:
        return self._buffer.acquire()

    def lease(self):
        return self._buffer.lease()

    def on_publish(self, listener: Callable[[ModelGeneration], None]) -> None:
        """
        Registers a callback invoked with every newly published generation (cache flushes).
        """
        self._listeners.append(listener)

    def reload(self, directory: str) -> ModelGeneration:
        """
        Loads, verifies and publishes the generation in ``directory``.

        :raises StaleGeneration: if it is not newer than the serving generation
        :raises VerificationFailed: if it does not verify; the old generation keeps serving
        """
        with self._reload_lock:
            new = ModelGeneration.load(directory, current=self.current)
            for listener in self._listeners:
                listener(new)
            old = self._buffer.publish(new)
            self.reloads += 1
            LOG.info("serving generation %d (was %d)", new.generation, old.generation)
            return new

    def _retire(self, generation: ModelGeneration) -> None:
        LOG.info("retiring generation %d", generation.generation)
        generation.close()

    def wait_retired(self, timeout: float = None) -> bool:
        return self._buffer.wait_retired(timeout)

    def watch(self, model_dir_root: str, poll_interval: float = config.POLL_INTERVAL):
        self._watcher = ModelWatcher(
            model_dir_root,
            on_trigger=self._on_trigger,
            current_generation=lambda: self.generation,
            poll_interval=poll_interval,
        ).start()
        return self._watcher

    def _on_trigger(self, directory: str) -> None:
        try:
            self.reload(directory)
        except (StaleGeneration, VerificationFailed) as e:
            LOG.warning("not reloading %s: %s", directory, e)

    def close(self) -> None:
        if self._watcher is not None:
            self._watcher.close()
        self.current.close()


def synthetic_parameters(
    key_universe: int, embedding_dim: int, rng: np.random.Generator
) -> Sequence[SparseParameter]:
    embeddings = rng.normal(0.0, 0.5, size=(key_universe, embedding_dim)).astype("<f4")
    shows = rng.poisson(20.0, size=key_universe).astype("<f4")
    clicks = rng.binomial(shows.astype(int), 0.1).astype("<f4")
    return [
        SparseParameter(embeddings[i], float(shows[i]), float(clicks[i]))
        for i in range(key_universe)
    ]


def write_synthetic_generation(
    directory: str,
    generation: int,
    key_universe: int = 10_000,
    embedding_dim: int = 8,
    models: Mapping[str, FeatureSlotSpec] = None,
    hidden: Sequence[int] = (32, 16),
    output_bias: float = 1.0,
    seed: int = 0,
    placement_policy: PlacementPolicy = all_memory,
    block_size_bytes: int = config.BLOCK_SIZE_BYTES,
    shard_count: int = 1,
) -> CubeManifest:
    """
    Writes a complete generation directory with random embeddings for the raw features
    ``k0 .. k<key_universe - 1>`` and one random dense model per entry of ``models``. The
    DONE sentinel is written after the dense models.
    """
    models = DEFAULT_MODELS if models is None else models
    rng = np.random.default_rng([seed, generation])

    params = synthetic_parameters(key_universe, embedding_dim, rng)
    manifest = build(
        ((f"k{i}", p) for i, p in enumerate(params)),
        directory,
        placement_policy=placement_policy,
        block_size_bytes=block_size_bytes,
        shard_count=shard_count,
        generation=generation,
        write_done=False,
    )
    for i, (name, slots) in enumerate(sorted(models.items())):
        model = random_model(
            name,
            slots,
            embedding_dim,
            hidden=hidden,
            generation=generation,
            seed=int(rng.integers(2**31)) + i,
            output_bias=output_bias,
        )
        save_model(model, model_path(directory, name))

    mark_done(directory)
    LOG.info("wrote synthetic generation %d with models %s", generation, sorted(models))
    return manifest
