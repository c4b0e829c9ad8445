"""Shared generators for randomized trials.

Every randomized test seeds its own Generator so failures replay
exactly; these helpers only shape the draws.
"""

import numpy as np


def random_stable_matrix(rng, n, margin_low=0.4, margin_high=1.5):
    """Random matrix with eigenvalue real parts pushed left of zero.

    The shift keeps the decay-rate spread moderate, so quadrature on an
    auto-sized grid resolves both the slowest and fastest modes.
    """
    g = rng.standard_normal((n, n)) / np.sqrt(n)
    shift = max(np.linalg.eigvals(g).real.max(), 0.0)
    return g - (shift + rng.uniform(margin_low, margin_high)) * np.eye(n)


def random_psd(rng, n, scale=1.0):
    f = rng.standard_normal((n, n))
    return scale * (f @ f.T) / n


def random_loop(rng, n_max=3, p_max=3):
    """Random stable block with a square loop and a PSD gain covariance."""
    import msslab

    n = int(rng.integers(1, n_max + 1))
    p = int(rng.integers(1, p_max + 1))
    a = random_stable_matrix(rng, n)
    b = rng.standard_normal((n, p)) / np.sqrt(n)
    c = rng.standard_normal((p, n)) / np.sqrt(n)
    gamma = random_psd(rng, p)
    return msslab.make_state_space(a, b, c), gamma
