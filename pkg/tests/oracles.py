"""Independent numerical oracles shared by the test suite.

These deliberately avoid the package's analytic code paths: gradients come
from central finite differences and expectations from brute-force midpoint
quadrature, so agreement is evidence rather than tautology.
"""

import numpy as np


def central_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function at x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        grad[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad


def central_diff_jacobian(f, x, h=1e-5):
    """Central-difference Jacobian (outputs stacked as rows) of a vector map."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2.0 * h))
    return np.stack(cols, axis=1)


def relative_error(approx, exact):
    approx = np.asarray(approx, dtype=float)
    exact = np.asarray(exact, dtype=float)
    scale = max(np.linalg.norm(exact.ravel()), 1e-12)
    return np.linalg.norm((approx - exact).ravel()) / scale


def grid_points(lo, hi, cells):
    """Midpoint-rule grid over a box: centers (N, d) and the cell volume."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    axes = [np.linspace(l, h, cells + 1) for l, h in zip(lo, hi)]
    centers = [0.5 * (a[1:] + a[:-1]) for a in axes]
    mesh = np.meshgrid(*centers, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    volume = np.prod((hi - lo) / cells)
    return pts, volume


def quadrature_posterior_mean(log_weight_fn, lo, hi, cells=400):
    """E[x] under an unnormalized log-density, by midpoint quadrature."""
    pts, _ = grid_points(lo, hi, cells)
    logw = log_weight_fn(pts)
    logw = logw - logw.max()
    w = np.exp(logw)
    w /= w.sum()
    return w @ pts
