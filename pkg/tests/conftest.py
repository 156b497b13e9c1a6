import numpy as np
import pytest
import torch

from mvcc.data import GeneratorParams, generate_synthetic_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_params():
    return GeneratorParams(T=4, H=16, W=16, patch_size=8)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, small_params):
    out = tmp_path_factory.mktemp("tiny")
    return generate_synthetic_dataset(24, small_params, 5, out)


@pytest.fixture(scope="session")
def toy8(tmp_path_factory):
    """Eight clips, all in the train split."""
    out = tmp_path_factory.mktemp("toy8")
    return generate_synthetic_dataset(8, GeneratorParams(T=4, H=16, W=16, split=(1.0, 0.0, 0.0)), 3, out)

