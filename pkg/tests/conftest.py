import os

# Cap the BLAS pool before numpy first loads: OpenBLAS initialized in threaded
# mode serializes concurrent LAPACK calls behind a lock, which both distorts
# the worker-scaling benchmark and slows the many small per-block solves.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from msinv.mesh import create_mesh, create_partition


@pytest.fixture
def small_mesh():
    return create_mesh(4, 4, 4, 1.0, 1.0, 1.0)


@pytest.fixture
def small_partition(small_mesh):
    return create_partition(small_mesh, 2, 2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(20240615)


def taylor_remainders(f, df, x, dx, eps0=1e-2, n=6):
    """Remainders ||f(x + e*dx) - f(x) - e*df|| over a halving sequence of e."""
    f0 = np.asarray(f(x))
    out = []
    eps = eps0
    for _ in range(n):
        r = np.asarray(f(x + eps * dx)) - f0 - eps * np.asarray(df)
        out.append(np.linalg.norm(r.ravel()))
        eps *= 0.5
    return np.asarray(out)


def assert_quadratic(remainders, lo=3.5, hi=4.5):
    """Check per-halving decay ratio is ~4; the last ratio may degrade."""
    r = np.asarray(remainders)
    ratios = r[:-1] / r[1:]
    core = ratios[:-1]
    assert np.all((core > lo) & (core < hi)), f"ratios {ratios}"
