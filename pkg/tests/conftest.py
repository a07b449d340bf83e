import os

import numpy as np
import pytest

from tokprobe.encoder import Encoder
from tokprobe.toy import random_weights, toy_config, toy_vocabulary

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures")


@pytest.fixture(scope="session")
def vocab():
    return toy_vocabulary()


@pytest.fixture(scope="session")
def model_config(vocab):
    return toy_config(vocab)


@pytest.fixture(scope="session")
def weights(model_config):
    return random_weights(model_config, 0)


@pytest.fixture(scope="session")
def encoder(model_config, weights):
    return Encoder(model_config, weights)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
