import os

import numpy as np
import pytest

from spatialground import synthgen
from spatialground.features import EmbeddingTable

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="session")
def embeddings_path() -> str:
    return os.path.join(FIXTURES, "embeddings_50d.txt")


@pytest.fixture(scope="session")
def embedding_table(embeddings_path) -> EmbeddingTable:
    return EmbeddingTable.load(embeddings_path)


@pytest.fixture(scope="session")
def small_benchmark(tmp_path_factory):
    """A 40-scene benchmark shared by the slower integration tests."""
    out = tmp_path_factory.mktemp("bench40")
    indices = synthgen.generate_benchmark(40, seed=97, out_dir=str(out))
    return str(out), indices


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
