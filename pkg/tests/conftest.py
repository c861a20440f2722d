"""Shared finite-difference oracles and small helpers."""

import numpy as np


def central_diff_grad(f, x, h):
    """Gradient of scalar f at x by central differences, one element at a time."""
    g = np.zeros(x.shape, np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def rel_err(analytic, reference):
    a = np.asarray(analytic, np.float64).ravel()
    b = np.asarray(reference, np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def fd_step(dtype):
    # 1e-4 probes 64-bit ops; 32-bit needs a coarser step to beat rounding
    return 1e-4 if np.dtype(dtype) == np.float64 else 1e-2


def fd_tolerance(dtype):
    return 1e-4 if np.dtype(dtype) == np.float64 else 1e-2
