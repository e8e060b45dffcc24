"""Shared helpers for the test suite.

``numeric_gradient`` is the test-side finite-difference oracle; it is kept
independent of the library's own gradient utilities on purpose.
"""

import numpy as np


def numeric_gradient(func, x, h=1e-5):
    """Central-difference gradient of scalar ``func`` w.r.t. array ``x``."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = func(x)
        flat_x[i] = orig - h
        f_minus = func(x)
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def max_relative_error(numeric, analytic, floor=1e-8):
    """Worst-case elementwise relative disagreement between two gradients."""
    numeric = np.asarray(numeric, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    denom = np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), floor)
    return float((np.abs(numeric - analytic) / denom).max(initial=0.0))


def random_rotation(rng):
    """Uniform-ish random 3x3 rotation via QR with positive determinant."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q
