import numpy as np
import pytest

from rankpipe.schema import Candidate, ScoreRequest
from rankpipe.service import ServiceConfig

from utils import KEY_UNIVERSE, write_generation


@pytest.fixture(scope="session")
def model_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("models")
    write_generation(str(root), 1)
    return str(root)


@pytest.fixture
def fresh_model_root(tmp_path):
    """
    A model root of its own, for tests that publish new generations.
    """
    root = tmp_path / "models"
    root.mkdir()
    write_generation(str(root), 1)
    return str(root)


@pytest.fixture
def service_config(model_root, tmp_path):
    return ServiceConfig(
        model_root=model_root,
        models=["dnn_ctr"],
        watch=False,
        cache_dir=str(tmp_path),
        sweep_interval=0,
        admission=0.0,
    )


@pytest.fixture
def make_request():
    def _make(i=0, candidates=12, user=None, timestamp=None, **kwargs):
        rng = np.random.default_rng(i)
        keys = rng.integers(0, KEY_UNIVERSE, size=2 + 3 * candidates)
        return ScoreRequest(
            user=user or f"u{i}",
            user_features={"u_profile": [f"k{keys[0]}"], "u_interest": [f"k{keys[1]}"]},
            candidates=[
                Candidate(
                    f"i{i}-{c}",
                    escore=float(rng.random()),
                    features={
                        "i_category": [f"k{keys[2 + 3 * c]}"],
                        "i_tag": [f"k{keys[3 + 3 * c]}", f"k{keys[4 + 3 * c]}"],
                    },
                )
                for c in range(candidates)
            ],
            request_id=f"r{i}",
            timestamp=float(i) if timestamp is None else timestamp,
            **kwargs,
        )

    return _make
