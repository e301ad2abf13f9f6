import numpy as np
import pytest


def numerical_gradient(f, x, h=1e-5):
    """Central finite differences of a scalar-valued f at x, elementwise."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(x)
        flat[i] = orig - h
        f_minus = f(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def assert_grad_close(analytic, numeric, tol=1e-4):
    """Relative error below tol, with an absolute floor for tiny gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    assert a.shape == n.shape
    err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
    assert err.max() < tol, f"gradient mismatch: max rel err {err.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
