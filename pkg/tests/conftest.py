import numpy as np
import pytest

from autolabel3d.geometry import builtin_car_template


@pytest.fixture(scope="session")
def car():
    return builtin_car_template(4.0, 1.6, 1.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def dense_surface_distance(mesh, queries, n_samples=100_000, seed=0):
    """Nearest-sample squared distance and the sampling resolution bound.

    The bound is the largest distance from any surface point to its nearest
    sample, estimated from a second, independent sample set.
    """
    from scipy.spatial import cKDTree

    rng = np.random.default_rng(seed)
    samples = mesh.sample_surface(rng, n_samples)
    tree = cKDTree(samples)
    d, _ = tree.query(queries)
    probe = mesh.sample_surface(np.random.default_rng(seed + 1), 20_000)
    gap, _ = tree.query(probe)
    return d ** 2, float(gap.max())
