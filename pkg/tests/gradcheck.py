"""Central finite differences, independent of the tape."""

import numpy as np

H = 1e-5
RTOL = 1e-4


def numeric_grad(f, x, h=H):
    """d f(x) / d x for a scalar-valued ``f`` of a float64 array, elementwise."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x.copy())
        x[i] = old - h
        down = f(x.copy())
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    """Max elementwise relative error, guarded for near-zero entries."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3)
    return float(np.max(np.abs(analytic - numeric) / scale))


def assert_grad_close(analytic, numeric, rtol=RTOL):
    err = rel_error(analytic, numeric)
    assert err < rtol, f"relative gradient error {err:.3e} exceeds {rtol:.0e}"
