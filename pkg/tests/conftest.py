import numpy as np
import pytest
from hypothesis import settings

from aspectbias.domain import Hyperparameters, RatingsDataset

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_dataset(users, items, ratings, K, J=None, I=None):
    """RatingsDataset built directly from index arrays (no duplicate-pair validation)."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ratings = np.atleast_2d(np.asarray(ratings, dtype=np.int64))
    J = int(users.max()) + 1 if J is None else J
    I = int(items.max()) + 1 if I is None else I
    A = ratings.shape[1]
    return RatingsDataset(users, items, ratings, K, tuple(f"u{j}" for j in range(J)),
                          tuple(f"i{i}" for i in range(I)), tuple(f"a{a}" for a in range(A)))


@pytest.fixture
def tiny_data():
    # 4 users, 3 items, 2 aspects, K=3, every pair observed
    rng = np.random.default_rng(11)
    users, items = np.divmod(np.arange(12), 3)
    return make_dataset(users, items, rng.integers(1, 4, size=(12, 2)), 3)


@pytest.fixture
def tiny_hp():
    return Hyperparameters.default(2, 2)


ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])


class FixedNoise:
    """Stand-in for the per-block streams that hands out a fixed noise vector."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    def block(self, phase, block):
        return self

    def standard_normal(self, size):
        return np.broadcast_to(self.value, size).copy()

    def random(self, size=None):
        return np.broadcast_to(self.value, size).copy() if size is not None else float(self.value)


def gaussian_moments(draw):
    """Mean and covariance of a linear-Gaussian sampler, read off with zero and unit noise."""
    mean = draw(np.zeros(1))
    A = mean.shape[-1]
    cols = []
    for a in range(A):
        e = np.zeros(A)
        e[a] = 1.0
        cols.append(draw(e) - mean)
    D = np.stack(cols, axis=-1)
    return mean, D @ np.swapaxes(D, -1, -2)
