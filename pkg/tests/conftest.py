import numpy as np
import pytest

from alsuv.worldgen import WorldParams, build_world


@pytest.fixture(scope="session")
def world():
    return build_world(WorldParams(), 0)


@pytest.fixture(scope="session")
def small_world():
    return build_world(WorldParams(latent_dim=4, image_dim=8, feature_dim=4, encoder_count=3,
                                   n_ids=6, samples_per_id=3, generator_hidden=8,
                                   encoder_width=8), 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
