"""Vectorized reference computations shared by unit and acceptance tests."""

import numpy as np


def overlap_keys(lo: np.ndarray, hi: np.ndarray, upper: np.ndarray = None) -> np.ndarray:
    """Sorted ``i * n + j`` keys (i < j) of all closed-interval AABB overlaps.

    All pairs are tested on x, survivors on y and z.
    """
    n = len(lo)
    if upper is None:
        upper = np.triu(np.ones((n, n), dtype=bool), 1)
    ov = lo[:, None, 0] <= hi[None, :, 0]
    ov &= ov.T.copy()
    ov &= upper
    cand = np.flatnonzero(ov)
    i, j = np.divmod(cand, n)
    keep = np.ones(len(cand), dtype=bool)
    for k in (1, 2):
        keep &= (lo[i, k] <= hi[j, k]) & (lo[j, k] <= hi[i, k])
    return cand[keep]
