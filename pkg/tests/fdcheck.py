"""Finite-difference helpers shared by the tests."""
import numpy as np


def central_difference(f, x, k, h=1e-5, richardson=True):
    """
    Central difference of scalar ``f`` along coordinate ``k``. With
    ``richardson`` the h and h/2 estimates are combined to cancel the
    O(h^2) term, which matters where third derivatives are large.
    """
    def d(step):
        e = np.zeros_like(x, dtype=float)
        e[k] = step
        return (f(x + e) - f(x - e)) / (2 * step)

    if not richardson:
        return d(h)
    return (4.0 * d(h / 2) - d(h)) / 3.0
