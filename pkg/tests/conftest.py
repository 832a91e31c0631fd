import time

import numpy as np
import pytest

from audet.data import SynthConfig, generate_synthetic
from audet.model import ModelConfig, ModelParams
from audet.training import TrainConfig, train

# Small-but-complete architecture for unit tests: every layer type of the
# default model, sized so one forward pass costs well under a millisecond.
TINY_MODEL = ModelConfig(
    image_size=24,
    conv_spec=((2, 3, 5, 2), (3, 4, 3, 2), (4, 4, 3, 1)),
    static_gru_hidden=8,
    dynamic_hidden=((10, "relu"), (8, "tanh")),
    fusion_out=8,
    au_embedding_dim=8,
)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(
        SynthConfig(videos=4, frames_per_video=10, seed=3, image_size=24)
    )


@pytest.fixture(scope="session")
def tiny_params():
    params = ModelParams.init(TINY_MODEL, seed=5, dtype=np.float64)
    return params


@pytest.fixture(scope="session")
def default_corpus():
    """The stock synthetic corpus: 50 videos of 60 frames, seed 7."""
    return generate_synthetic(SynthConfig())


@pytest.fixture(scope="session")
def e2e_result(default_corpus):
    """One full default training run, shared by the acceptance tests.

    Returns (result, wall_seconds) so the runtime budget can be checked.
    """
    start = time.perf_counter()
    result = train(default_corpus, ModelConfig(), TrainConfig())
    return result, time.perf_counter() - start
