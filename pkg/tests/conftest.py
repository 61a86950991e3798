import numpy as np
import pytest
import torch

from mig.prompt_library import build_library
from mig.synthetic_data import SceneSpec, generate_splits


@pytest.fixture(scope="session")
def small_splits():
    return generate_splits(SceneSpec(seed=3), 40, 12)


@pytest.fixture(scope="session")
def small_library(small_splits):
    return build_library(small_splits[0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _one_thread():
    torch.set_num_threads(1)
    yield
