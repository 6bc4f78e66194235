"""Exact similarity scoring shared by brute force and re-ranking.

Both paths go through the same compiled loop so that scores for a given
(vector, query) pair are bit-identical no matter which path produced them.
That is what lets a lossless pipeline be compared to brute force with ``==``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .graph import metric_code


@njit(cache=True, nogil=True)
def _score(vectors, ids, query, metric, out):
    dim = vectors.shape[1]
    for r in range(ids.shape[0]):
        i = ids[r]
        s = 0.0
        if metric == 0:
            for j in range(dim):
                s += np.float64(vectors[i, j]) * query[j]
            out[r] = s
        else:
            for j in range(dim):
                t = np.float64(vectors[i, j]) - query[j]
                s += t * t
            out[r] = -s


def exact_scores(vectors: np.ndarray, query, ids=None, metric: str = "inner_product") -> np.ndarray:
    """Similarity of ``query`` to the selected rows (all rows if ``ids`` is None).

    Inner product, or negated squared Euclidean distance; float64 accumulation.
    """
    if not vectors.flags.c_contiguous:
        vectors = np.ascontiguousarray(vectors)
    q = np.ascontiguousarray(query, dtype=np.float64)
    ids = np.arange(vectors.shape[0], dtype=np.int64) if ids is None else np.ascontiguousarray(ids, dtype=np.int64)
    out = np.empty(ids.shape[0], dtype=np.float64)
    _score(vectors, ids, q, metric_code(metric), out)
    return out


def top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` best entries, ordered by (-score, id)."""
    k = min(k, scores.shape[0])
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if k < scores.shape[0]:
        # keep every entry tied with the k-th best so the id tie-break is exact
        kth = np.partition(scores, scores.shape[0] - k)[scores.shape[0] - k]
        pos = np.flatnonzero(scores >= kth)
    else:
        pos = np.arange(scores.shape[0])
    order = np.lexsort((ids[pos], -scores[pos]))
    return pos[order[:k]]

