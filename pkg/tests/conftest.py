import numpy as np
import pytest


def numeric_gradient(f, x, h=1e-5):
    """Central finite differences of scalar f at x (x is modified in place
    during probing and restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a, b):
    scale = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-12)
    return np.linalg.norm((a - b).ravel()) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
