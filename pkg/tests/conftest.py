import os

import hypothesis
import numpy as np
import pytest
import torch

from stmodel import RegressorConfig, build_regressor
from util import setup_logging
from zidata import SegmentBatch, generate_synthetic_zid, standardize, window

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("acceptance", max_examples=1000, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)
setup_logging("WARNING")

HISTORY = 4
HORIZON = 2


def make_batch(batch_size=3, history=HISTORY, num_nodes=8, feature_dim=3, horizon=HORIZON, seed=0,
               nonzero_rate=0.3):
    """Random standardized-looking batch with counts on roughly nonzero_rate of the labels."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(batch_size, history, num_nodes, feature_dim)).astype(np.float32)
    counts = rng.integers(1, 5, size=(batch_size, horizon, num_nodes))
    Y = np.where(rng.uniform(size=counts.shape) < nonzero_rate, counts, 0).astype(np.float32)
    return SegmentBatch(torch.from_numpy(X), torch.from_numpy(Y), list(range(batch_size)))


def make_model(num_nodes=8, feature_dim=3, seed=0, hidden_dim=8, num_views=2):
    return build_regressor(RegressorConfig(input_dim=feature_dim, num_nodes=num_nodes, history=HISTORY,
                                           horizon=HORIZON, hidden_dim=hidden_dim, recurrent_dim=hidden_dim,
                                           num_views=num_views, seed=seed))


@pytest.fixture(scope="session")
def dataset():
    return generate_synthetic_zid(8, 96, 3, 0.8, seed=0)


@pytest.fixture(scope="session")
def graph(dataset):
    return dataset.graph


@pytest.fixture(scope="session")
def batches(dataset):
    (scaled,), _ = standardize(dataset)
    return window(scaled, HISTORY, HORIZON, stride=1, batch_size=4)


@pytest.fixture
def batch():
    return make_batch()


@pytest.fixture
def model():
    return make_model()
