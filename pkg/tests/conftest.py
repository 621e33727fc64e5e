import numpy as np
import pytest


def central_difference(fn, x, h=1e-5):
    """Central finite-difference gradient of scalar fn at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp = fn(x)
        flat[i] = orig - h
        lm = fn(x)
        flat[i] = orig
        gflat[i] = (lp - lm) / (2 * h)
    return grad


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst relative error; the floor keeps near-zero pairs from dividing by ~0."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def assert_grad_close(analytic, numeric, tol=1e-4):
    err = max_rel_err(analytic, numeric)
    assert err < tol, f"gradient mismatch: max relative error {err:.3g} >= {tol}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
