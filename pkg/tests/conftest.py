import pytest

from persrep.encoder.base import make_toy_encoder
from persrep.generation.synthesis import GeneratorConfig, synthesize_pool
from persrep.toy import make_toy_dataset


@pytest.fixture(scope="session")
def toy_dataset():
    return make_toy_dataset()


@pytest.fixture(scope="session")
def toy_encoder():
    return make_toy_encoder()


@pytest.fixture(scope="session")
def small_pool(toy_dataset):
    iid = toy_dataset.ids[0]
    return synthesize_pool(toy_dataset, iid, GeneratorConfig(n_positives=12, n_negatives=24, seed=3))
