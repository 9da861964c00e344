import numpy as np
import pytest

from alora import Engine, ModelConfig, random_weights


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(n_layers=2, n_heads=2, d_model=16, d_head=8,
                       vocab_size=32, max_positions=128)


@pytest.fixture(scope="session")
def tiny_weights(tiny_config):
    return random_weights(tiny_config, seed=0)


@pytest.fixture(scope="session")
def tiny_engine(tiny_config, tiny_weights):
    return Engine(tiny_weights, tiny_config)


@pytest.fixture(scope="session")
def toy_config():
    # default architecture, shorter position budget for test speed
    return ModelConfig(n_layers=4, n_heads=4, d_model=64, d_head=16,
                       vocab_size=256, max_positions=512)


@pytest.fixture(scope="session")
def toy_weights(toy_config):
    return random_weights(toy_config, seed=1)


@pytest.fixture(scope="session")
def toy_engine(toy_config, toy_weights):
    return Engine(toy_weights, toy_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
