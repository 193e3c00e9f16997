"""Small order-statistic helpers shared by the feature and tree code."""
import math

import numpy as np


def nearest_rank_index(n: int, q: float) -> int:
    """Zero-based index of the ceil(q * n)-th order statistic."""
    if n < 1:
        raise ValueError("need at least one value")
    # guard against q * n landing a hair above an integer
    k = math.ceil(round(q * n, 9))
    return min(max(k, 1), n) - 1


def nearest_rank(values, q: float) -> float:
    """Interpolation-free empirical quantile (type 1)."""
    arr = np.asarray(values, dtype=np.float64).ravel()
    k = nearest_rank_index(arr.size, q)
    return float(np.partition(arr, k)[k])
