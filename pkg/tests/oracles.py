"""Independent reference computations used by the tests."""

import numpy as np


def numeric_prox(z, delta):
    """Minimize ``0.5 * ||b - z||^2 + delta * ||b||`` numerically.

    The norm is smoothed to ``sqrt(||b||^2 + mu^2)`` and the smooth
    problem solved by damped Newton steps while ``mu`` is driven from 1 to
    1e-13. The smoothing moves the minimizer by at most ``delta * mu``.
    """
    z = np.asarray(z, dtype=float)
    d = z.size
    b = z.copy()

    def f(b, mu):
        return 0.5 * float((b - z) @ (b - z)) + delta * float(np.sqrt(b @ b + mu * mu))

    for mu in 10.0 ** -np.arange(0, 14):
        for _ in range(200):
            s = float(np.sqrt(b @ b + mu * mu))
            grad = b - z + delta * b / s
            hess = np.eye(d) + (delta / s) * (np.eye(d) - np.outer(b, b) / (s * s))
            step = np.linalg.solve(hess, grad)
            t, f0 = 1.0, f(b, mu)
            while f(b - t * step, mu) > f0 - 0.25 * t * float(grad @ step) and t > 1e-12:
                t *= 0.5
            b = b - t * step
            if np.linalg.norm(t * step) <= 1e-15 * max(1.0, np.linalg.norm(b)):
                break
    return b


def cox_de_boor(x, knots, degree):
    """Textbook recursive B-spline basis values at scalar ``x``.

    The right end of the domain is assigned to the last nonempty interval.
    """
    t = np.asarray(knots, dtype=float)
    n_basis = len(t) - degree - 1

    def N(i, k):
        if k == 0:
            if t[i] <= x < t[i + 1]:
                return 1.0
            last = np.flatnonzero(t[:-1] < t[1:])[-1]
            return 1.0 if (x == t[-1] and i == last) else 0.0
        out = 0.0
        if t[i + k] != t[i]:
            out += (x - t[i]) / (t[i + k] - t[i]) * N(i, k - 1)
        if t[i + k + 1] != t[i + 1]:
            out += (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * N(i + 1, k - 1)
        return out

    return np.array([N(i, degree) for i in range(n_basis)])
