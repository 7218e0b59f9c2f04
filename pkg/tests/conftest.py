import numpy as np
import pytest

from find3d import accel
from find3d.cloud import PointCloud


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    # JIT compilation happens once here so individual tests time only the work
    accel.warmup()


def make_cloud(n=200, seed=0, with_normals=True, spread=0.5) -> PointCloud:
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-spread, spread, (n, 3))
    if with_normals:
        nrm = rng.standard_normal((n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    else:
        nrm = np.zeros((n, 3))
    col = rng.uniform(0, 1, (n, 3))
    return PointCloud(pos, nrm, col)


@pytest.fixture
def small_cloud():
    return make_cloud(n=120, seed=3)
