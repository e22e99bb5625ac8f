import numpy as np
import pytest

from nbode.dataset import generate_splits
from nbode.systems import lorenz63


@pytest.fixture(scope="session")
def l63_tiny_splits():
    """Small but real Lorenz63 splits shared across test modules."""
    return generate_splits(lorenz63(), noise_std=0.05, seed=7, n_traj=4,
                           n_time=240, timescale_traj=2, timescale_horizon=40.0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
