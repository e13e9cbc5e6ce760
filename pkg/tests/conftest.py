import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gatpos.graph import Dataset, symmetrize
from gatpos.synthetic import load_fixture, two_cluster

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def path3():
    """Path 0-1-2 with labels [0, 0, 1]."""
    return Dataset(symmetrize([(0, 1), (1, 2)], 3), np.eye(3), np.array([0, 0, 1]), 2, name="path3")


@pytest.fixture
def five_node():
    g = symmetrize([(0, 1), (1, 2), (2, 3), (3, 4), (1, 3)], 5)
    return Dataset(g, np.eye(5), np.array([0, 1, 0, 1, 0]), 2, name="five")


@pytest.fixture
def fixture12():
    return load_fixture()


@pytest.fixture
def cluster12():
    return two_cluster(12, seed=3)
