import math
import os

import numpy as np

from rankpipe.models import write_synthetic_generation
from rankpipe.shedding import FEATURE_COUNT, PruningModel

KEY_UNIVERSE = 2000


def write_generation(model_root: str, generation: int, seed: int = None) -> str:
    directory = os.path.join(model_root, f"gen-{generation}")
    seed = generation if seed is None else seed
    write_synthetic_generation(directory, generation, key_universe=KEY_UNIVERSE, seed=seed)
    return directory


def constant_pruner(keep_fraction: float, min_keep: float = 0.05) -> PruningModel:
    """
    A pruning model predicting the same keep fraction for every request.
    """
    logit = math.log(keep_fraction / (1.0 - keep_fraction))
    return PruningModel(
        w1=np.zeros((FEATURE_COUNT, 2)),
        b1=np.zeros(2),
        w2=np.zeros((2, 1)),
        b2=np.array([logit]),
        mean=np.zeros(FEATURE_COUNT),
        std=np.ones(FEATURE_COUNT),
        min_keep=min_keep,
    )
