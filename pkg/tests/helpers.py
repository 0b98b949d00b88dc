"""Statistical helpers shared by the test modules."""

import numpy as np


def within_sigma(observed, expected, se, k=3.0):
    """True when every ``observed`` is within ``k`` standard errors of ``expected``."""
    return bool(np.all(np.abs(np.asarray(observed) - np.asarray(expected)) <= k * np.asarray(se)))


def multinomial_se(p, draws):
    """Standard error of each empirical cell frequency."""
    p = np.asarray(p, dtype=float)
    return np.sqrt(p * (1 - p) / draws)
