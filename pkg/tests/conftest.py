import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ccpool import PooledData

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_pooled(rng, K=2, d=1, n=(4, 5)):
    """Random pooled data with at least one case and one control per study."""
    study, y, x = [], [], []
    for k in range(K):
        m = int(rng.integers(n[0], n[1] + 1))
        yy = np.zeros(m)
        yy[: int(rng.integers(1, m))] = 1
        study += [k + 1] * m
        y += list(rng.permutation(yy))
        x.append(rng.normal(size=(m, d)))
    return PooledData.from_arrays(study, y, np.vstack(x))


def random_masses(rng, N):
    p = rng.uniform(0.2, 1.0, size=N)
    return p / p.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_data(rng):
    return random_pooled(rng, K=2, d=2, n=(4, 6))
