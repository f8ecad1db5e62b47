"""Nearest-rank order statistics, shared by every percentile in the package."""

import math

import numpy as np


def nearest_rank_index(q: float, n: int) -> int:
    """0-based index of the q-quantile under the nearest-rank rule.

    On an ascending sort of n values the q-quantile is element
    ceil(q*n) - 1.  q must lie in (0, 1] and n must be positive.
    """
    if n <= 0:
        raise ValueError(f"need at least one value, got n={n}")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quantile must be in (0, 1], got {q}")
    return min(n - 1, max(0, math.ceil(q * n) - 1))


def percentile_nearest_rank(values, q: float) -> float:
    """Nearest-rank q-quantile of a flat collection of values."""
    arr = np.asarray(values).ravel()
    s = np.sort(arr)
    return float(s[nearest_rank_index(q, s.size)])
