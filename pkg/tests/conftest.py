import numpy as np
import pytest


def finite_difference(f, x, eps=1e-5):
    """Central finite differences of scalar f() w.r.t. array x (in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(analytic, numeric):
    """Max abs difference normalized by the largest gradient magnitude."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return np.abs(analytic - numeric).max() / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
