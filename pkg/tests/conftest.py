import numpy as np
import pytest

from fedrec.data import leave_one_out_split
from fedrec.synthetic import two_community_dataset


@pytest.fixture(scope="session")
def small_dataset():
    return two_community_dataset(n_users=30, n_items=20, seed=7, per_user=6)


@pytest.fixture(scope="session")
def small_split(small_dataset):
    return leave_one_out_split(small_dataset)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
