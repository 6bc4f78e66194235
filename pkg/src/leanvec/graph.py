"""Vamana-style proximity graph: construction and best-first search.

The graph is stored as a fixed-width ``n x R`` neighbor table (padded with -1)
plus a degree array, which is what the numba kernels below operate on.

Distances are "smaller is closer" everywhere inside this module: squared
Euclidean distance for ``euclidean`` and the negated inner product for
``inner_product``. Public search functions return similarity scores, i.e. the
negated distance, sorted descending.
"""

from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ValidationError

IP = 0
L2 = 1
_METRIC_CODES = {"inner_product": IP, "ip": IP, "euclidean": L2, "l2": L2}

DEFAULT_ALPHA = {IP: 0.95, L2: 1.2}
PARALLEL_BATCH = 256


def metric_code(metric: str) -> int:
    try:
        return _METRIC_CODES[metric]
    except KeyError:
        raise ValidationError(f"unknown metric {metric!r}") from None


@dataclass(frozen=True)
class GraphBuildConfig:
    max_degree: int = 128
    build_window: int = 200
    prune_alpha: float | None = None  # None: 1.2 for euclidean, 0.95 for inner product
    entry_point: str | int = "medoid"
    fill: bool = False  # top up pruned lists to max_degree with occluded candidates

    def __post_init__(self):
        if self.max_degree < 2:
            raise ValidationError("max_degree must be >= 2")
        if self.build_window < self.max_degree:
            raise ValidationError("build_window must be >= max_degree")
        if self.prune_alpha is not None and self.prune_alpha <= 0:
            raise ValidationError("prune_alpha must be positive")

    def alpha_for(self, metric: str) -> float:
        if self.prune_alpha is not None:
            return float(self.prune_alpha)
        return DEFAULT_ALPHA[metric_code(metric)]


@dataclass(frozen=True)
class SearchParams:
    window: int = 50
    candidates_out: int = 50

    def __post_init__(self):
        if self.window < 1:
            raise ValidationError("search window must be >= 1")
        if not 1 <= self.candidates_out <= self.window:
            raise ValidationError("candidates_out must lie in [1, window]")


@dataclass
class GraphIndex:
    neighbors: np.ndarray  # n x R int32, -1 padded
    degrees: np.ndarray  # n int32
    entry: int

    @property
    def node_count(self) -> int:
        return self.neighbors.shape[0]

    @property
    def max_degree(self) -> int:
        return self.neighbors.shape[1]

    def adjacency(self, node: int) -> np.ndarray:
        return self.neighbors[node, : self.degrees[node]]

    @classmethod
    def from_lists(cls, lists, max_degree: int | None = None, entry: int = 0) -> "GraphIndex":
        width = max_degree or max((len(x) for x in lists), default=1) or 1
        nbrs = np.full((len(lists), width), -1, dtype=np.int32)
        degs = np.zeros(len(lists), dtype=np.int32)
        for i, adj in enumerate(lists):
            if len(adj) > width:
                raise ValidationError(f"node {i} has {len(adj)} neighbors, more than {width}")
            nbrs[i, : len(adj)] = adj
            degs[i] = len(adj)
        return cls(nbrs, degs, entry)

    @classmethod
    def complete(cls, n: int, entry: int = 0) -> "GraphIndex":
        return cls.from_lists([[j for j in range(n) if j != i] for i in range(n)], max(n - 1, 1), entry)


def greedy_search(index: GraphIndex, score, params: SearchParams) -> list[tuple[int, float]]:
    """Best-first search with a size-``window`` pool, using any scoring callable.

    ``score(ids)`` receives an int array and returns similarities (higher is
    better). Returns up to ``candidates_out`` ``(id, score)`` pairs ordered by
    descending score, ties broken by smaller id.
    """
    n = index.node_count
    if n == 0:
        return []
    visited = np.zeros(n, dtype=bool)
    entry = int(index.entry)
    visited[entry] = True
    # pool entries are (distance, id); distance = -score
    pool = [(-float(score(np.array([entry]))[0]), entry)]
    expanded = set()
    while True:
        nxt = next((item for item in pool if item[1] not in expanded), None)
        if nxt is None:
            break
        expanded.add(nxt[1])
        nbrs = index.adjacency(nxt[1])
        fresh = nbrs[~visited[nbrs]]
        if fresh.size == 0:
            continue
        visited[fresh] = True
        for node, s in zip(fresh.tolist(), np.asarray(score(fresh), dtype=np.float64).tolist()):
            item = (-s, node)
            if len(pool) < params.window:
                heapq.heappush(pool, item)
                pool.sort()
            elif item < pool[-1]:
                pool[-1] = item
                pool.sort()
    return [(node, -dist) for dist, node in sorted(pool)[: params.candidates_out]]


@njit(cache=True, nogil=True)
def _dist_query(vectors, i, query, metric):
    s = 0.0
    if metric == 0:
        for j in range(vectors.shape[1]):
            s += vectors[i, j] * query[j]
        return -s
    for j in range(vectors.shape[1]):
        t = vectors[i, j] - query[j]
        s += t * t
    return s


@njit(cache=True, nogil=True)
def _dist_nodes(vectors, i, k, metric):
    s = 0.0
    if metric == 0:
        for j in range(vectors.shape[1]):
            s += np.float64(vectors[i, j]) * vectors[k, j]
        return -s
    for j in range(vectors.shape[1]):
        t = np.float64(vectors[i, j]) - vectors[k, j]
        s += t * t
    return s


@njit(cache=True, nogil=True)
def _beam_search(neighbors, degrees, entry, vectors, query, metric, window, visited, epoch, pool_ids, pool_d,
                 exp_ids, exp_d):
    """Fill ``pool_ids``/``pool_d`` (ascending by (distance, id)).

    Expanded nodes are also logged to ``exp_ids``/``exp_d`` up to their
    capacity. Returns ``(pool size, number logged)``.
    """
    expanded = np.zeros(window, dtype=np.bool_)
    logged = 0
    visited[entry] = epoch
    pool_ids[0] = entry
    pool_d[0] = _dist_query(vectors, entry, query, metric)
    size = 1
    while True:
        k = -1
        for j in range(size):
            if not expanded[j]:
                k = j
                break
        if k < 0:
            break
        expanded[k] = True
        node = pool_ids[k]
        if logged < exp_ids.shape[0]:
            exp_ids[logged] = node
            exp_d[logged] = pool_d[k]
            logged += 1
        for e in range(degrees[node]):
            nb = neighbors[node, e]
            if visited[nb] == epoch:
                continue
            visited[nb] = epoch
            dd = _dist_query(vectors, nb, query, metric)
            if size == window:
                if dd > pool_d[size - 1] or (dd == pool_d[size - 1] and nb > pool_ids[size - 1]):
                    continue
            pos = 0
            while pos < size and (pool_d[pos] < dd or (pool_d[pos] == dd and pool_ids[pos] < nb)):
                pos += 1
            last = size if size < window else window - 1
            for j in range(last, pos, -1):
                pool_ids[j] = pool_ids[j - 1]
                pool_d[j] = pool_d[j - 1]
                expanded[j] = expanded[j - 1]
            pool_ids[pos] = nb
            pool_d[pos] = dd
            expanded[pos] = False
            if size < window:
                size += 1
    return size, logged


@njit(cache=True, nogil=True)
def _sort_candidates(ids, dists, count):
    """Sort the first ``count`` entries by (distance, id) in place."""
    order = np.argsort(ids[:count], kind="mergesort")
    ids_s = ids[:count][order]
    d_s = dists[:count][order]
    order = np.argsort(d_s, kind="mergesort")
    ids[:count] = ids_s[order]
    dists[:count] = d_s[order]


@njit(cache=True, nogil=True)
def _prune(node, cand_ids, cand_d, count, vectors, metric, alpha, max_degree, out, fill=False):
    """Occlusion pruning over candidates already sorted by (distance, id)."""
    kept = 0
    for ci in range(count):
        c = cand_ids[ci]
        if c == node:
            continue
        occluded = False
        for k in range(kept):
            if alpha * _dist_nodes(vectors, out[k], c, metric) <= cand_d[ci]:
                occluded = True
                break
        if not occluded:
            out[kept] = c
            kept += 1
            if kept == max_degree:
                return kept
    if fill:
        # top up with the closest occluded candidates
        for ci in range(count):
            if kept == max_degree:
                break
            c = cand_ids[ci]
            if c == node:
                continue
            taken = False
            for k in range(kept):
                if out[k] == c:
                    taken = True
                    break
            if not taken:
                out[kept] = c
                kept += 1
    return kept


@njit(cache=True, nogil=True)
def _search_and_prune(node, neighbors, degrees, entry, vectors, metric, window, alpha, fill,
                      visited, mark, epoch, pool_ids, pool_d, exp_ids, exp_d, cand_ids, cand_d, out):
    """Candidates are every expanded node, the final pool and the current out-neighbors."""
    query = vectors[node].astype(np.float64)
    size, logged = _beam_search(neighbors, degrees, entry, vectors, query, metric, window, visited, epoch,
                                pool_ids, pool_d, exp_ids, exp_d)
    mark[node] = epoch
    count = 0
    for j in range(logged):
        c = exp_ids[j]
        if mark[c] != epoch:
            mark[c] = epoch
            cand_ids[count] = c
            cand_d[count] = exp_d[j]
            count += 1
    for j in range(size):
        c = pool_ids[j]
        if mark[c] != epoch:
            mark[c] = epoch
            cand_ids[count] = c
            cand_d[count] = pool_d[j]
            count += 1
    for e in range(degrees[node]):
        c = neighbors[node, e]
        if mark[c] != epoch:
            mark[c] = epoch
            cand_ids[count] = c
            cand_d[count] = _dist_nodes(vectors, node, c, metric)
            count += 1
    _sort_candidates(cand_ids, cand_d, count)
    return _prune(node, cand_ids, cand_d, count, vectors, metric, alpha, neighbors.shape[1], out, fill)


@njit(cache=True, nogil=True)
def _add_reverse(target, source, neighbors, degrees, vectors, metric, alpha, fill, cand_ids, cand_d, out):
    deg = degrees[target]
    for e in range(deg):
        if neighbors[target, e] == source:
            return
    if deg < neighbors.shape[1]:
        neighbors[target, deg] = source
        degrees[target] = deg + 1
        return
    for e in range(deg):
        cand_ids[e] = neighbors[target, e]
        cand_d[e] = _dist_nodes(vectors, target, cand_ids[e], metric)
    cand_ids[deg] = source
    cand_d[deg] = _dist_nodes(vectors, target, source, metric)
    _sort_candidates(cand_ids, cand_d, deg + 1)
    kept = _prune(target, cand_ids, cand_d, deg + 1, vectors, metric, alpha, neighbors.shape[1], out, fill)
    for e in range(kept):
        neighbors[target, e] = out[e]
    for e in range(kept, neighbors.shape[1]):
        neighbors[target, e] = -1
    degrees[target] = kept


@njit(cache=True, nogil=True)
def _commit(node, new_ids, kept, neighbors, degrees, vectors, metric, alpha, fill, cand_ids, cand_d, out):
    for e in range(kept):
        neighbors[node, e] = new_ids[e]
    for e in range(kept, neighbors.shape[1]):
        neighbors[node, e] = -1
    degrees[node] = kept
    for e in range(kept):
        _add_reverse(new_ids[e], node, neighbors, degrees, vectors, metric, alpha, fill, cand_ids, cand_d, out)


EXPANSION_LOG = 4  # expanded nodes logged per build search, in multiples of the window


@njit(cache=True, nogil=True)
def _insert_sequential(order, neighbors, degrees, entry, vectors, metric, window, alpha, fill,
                       visited, mark, epoch0):
    max_degree = neighbors.shape[1]
    cap = EXPANSION_LOG * window
    pool_ids = np.empty(window, dtype=np.int64)
    pool_d = np.empty(window, dtype=np.float64)
    exp_ids = np.empty(cap, dtype=np.int64)
    exp_d = np.empty(cap, dtype=np.float64)
    cand_ids = np.empty(cap + window + max_degree + 1, dtype=np.int64)
    cand_d = np.empty(cap + window + max_degree + 1, dtype=np.float64)
    out = np.empty(max_degree, dtype=np.int64)
    new_ids = np.empty(max_degree, dtype=np.int64)
    epoch = epoch0
    for node in order:
        epoch += 1
        kept = _search_and_prune(node, neighbors, degrees, entry, vectors, metric, window, alpha, fill,
                                 visited, mark, epoch, pool_ids, pool_d, exp_ids, exp_d, cand_ids, cand_d, out)
        new_ids[:kept] = out[:kept]
        _commit(node, new_ids, kept, neighbors, degrees, vectors, metric, alpha, fill, cand_ids, cand_d, out)
    return epoch


@njit(cache=True, nogil=True)
def _propose(order, neighbors, degrees, entry, vectors, metric, window, alpha, fill, visited, mark, epoch0,
             lists, counts):
    """Read-only half of a parallel batch: search and prune, write proposals."""
    max_degree = neighbors.shape[1]
    cap = EXPANSION_LOG * window
    pool_ids = np.empty(window, dtype=np.int64)
    pool_d = np.empty(window, dtype=np.float64)
    exp_ids = np.empty(cap, dtype=np.int64)
    exp_d = np.empty(cap, dtype=np.float64)
    cand_ids = np.empty(cap + window + max_degree + 1, dtype=np.int64)
    cand_d = np.empty(cap + window + max_degree + 1, dtype=np.float64)
    out = np.empty(max_degree, dtype=np.int64)
    epoch = epoch0
    for b in range(order.shape[0]):
        epoch += 1
        kept = _search_and_prune(order[b], neighbors, degrees, entry, vectors, metric, window, alpha, fill,
                                 visited, mark, epoch, pool_ids, pool_d, exp_ids, exp_d, cand_ids, cand_d, out)
        lists[b, :kept] = out[:kept]
        counts[b] = kept
    return epoch


@njit(cache=True, nogil=True)
def _commit_batch(order, lists, counts, neighbors, degrees, vectors, metric, alpha, fill, window):
    max_degree = neighbors.shape[1]
    cand_ids = np.empty(window + max_degree + 1, dtype=np.int64)
    cand_d = np.empty(window + max_degree + 1, dtype=np.float64)
    out = np.empty(max_degree, dtype=np.int64)
    for b in range(order.shape[0]):
        _commit(order[b], lists[b], counts[b], neighbors, degrees, vectors, metric, alpha, fill, cand_ids, cand_d, out)


def medoid(vectors, metric: str, sample: int = 10_000, seed: int = 0) -> int:
    """Exact medoid of a sample under the metric, in one pass over the sample."""
    x = np.asarray(vectors, dtype=np.float64)
    ids = np.arange(x.shape[0])
    if x.shape[0] > sample:
        ids = np.sort(np.random.default_rng(seed).choice(x.shape[0], sample, replace=False))
    s = x[ids]
    total = s.sum(axis=0)
    if metric_code(metric) == L2:
        # sum_i ||c - x_i||^2 = m ||c||^2 - 2 <c, sum x_i> + const
        cost = s.shape[0] * np.einsum("ij,ij->i", s, s) - 2.0 * s @ total
    else:
        cost = -(s @ total)
    return int(ids[np.argmin(cost)])


def _batches(n: int, doubling: bool = False) -> list[tuple[int, int]]:
    # doubling sizes while the graph is still sparse, so early nodes see each other
    out, start, size = [], 0, 1 if doubling else PARALLEL_BATCH
    while start < n:
        out.append((start, min(start + size, n)))
        start += size
        size = min(2 * size, PARALLEL_BATCH)
    return out


def build(vectors, config: GraphBuildConfig | None = None, metric: str = "inner_product",
          seed: int = 0, threads: int = 1) -> GraphIndex:
    """Two passes of search-then-prune insertion over a seeded permutation.

    The first pass prunes with alpha = 1, the second with the configured
    alpha. ``threads == 1`` processes nodes strictly one after another.
    With more threads, nodes are handled in batches (sizes doubling up to a
    cap during the first pass): proposals for
    a batch are computed concurrently against the frozen graph, then
    committed in order, so the result depends on the batch size but not on
    the thread count.
    """
    config = config or GraphBuildConfig()
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("graph build needs a non-empty n x dim matrix")
    if not np.all(np.isfinite(x)):
        raise ValidationError("graph build input contains non-finite values")
    n = x.shape[0]
    code = metric_code(metric)
    r = min(config.max_degree, max(n - 1, 1))
    window = max(config.build_window, r)
    if isinstance(config.entry_point, str):
        if config.entry_point != "medoid":
            raise ValidationError(f"unknown entry point {config.entry_point!r}")
        entry = medoid(x, metric, seed=seed)
    else:
        entry = int(config.entry_point)
        if not 0 <= entry < n:
            raise ValidationError(f"entry point {entry} out of range")
    neighbors = np.full((n, r), -1, dtype=np.int32)
    degrees = np.zeros(n, dtype=np.int32)
    order = np.random.default_rng(seed).permutation(n).astype(np.int64)
    final_alpha = config.alpha_for(metric)
    fill = bool(config.fill)

    if threads <= 1:
        visited = np.zeros(n, dtype=np.int64)
        mark = np.zeros(n, dtype=np.int64)
        epoch = 0
        for alpha in (1.0, final_alpha):
            epoch = _insert_sequential(order, neighbors, degrees, entry, x, code, window, alpha, fill,
                                       visited, mark, epoch)
        return GraphIndex(neighbors, degrees, entry)

    visited = [np.zeros(n, dtype=np.int64) for _ in range(threads)]
    marks = [np.zeros(n, dtype=np.int64) for _ in range(threads)]
    epochs = [0] * threads
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for alpha, bounds in ((1.0, _batches(n, doubling=True)), (final_alpha, _batches(n))):
            for start, stop in bounds:
                batch = order[start:stop]
                lists = np.full((batch.size, r), -1, dtype=np.int64)
                counts = np.zeros(batch.size, dtype=np.int64)
                slices = np.array_split(np.arange(batch.size), threads)

                def work(t, sl=slices, batch=batch, lists=lists, counts=counts, alpha=alpha):
                    idx = sl[t]
                    if idx.size == 0:
                        return
                    sub_lists = np.empty((idx.size, r), dtype=np.int64)
                    sub_counts = np.empty(idx.size, dtype=np.int64)
                    epochs[t] = _propose(batch[idx], neighbors, degrees, entry, x, code, window, alpha, fill,
                                         visited[t], marks[t], epochs[t], sub_lists, sub_counts)
                    lists[idx] = sub_lists
                    counts[idx] = sub_counts

                list(pool.map(work, range(threads)))
                _commit_batch(batch, lists, counts, neighbors, degrees, x, code, alpha, fill, window)
    return GraphIndex(neighbors, degrees, entry)


def robust_prune(node: int, candidates, config: GraphBuildConfig, vectors, metric: str = "inner_product",
                 alpha: float | None = None) -> list[int]:
    """Occlusion pruning of ``(id, distance)`` candidates for ``node``.

    Distances follow this module's convention (negated inner product or
    squared Euclidean). Returns at most ``max_degree`` ids ordered by
    distance to ``node``.
    """
    x = np.ascontiguousarray(vectors, dtype=np.float32)
    cands = [(int(i), float(d)) for i, d in candidates if int(i) != node]
    if not cands:
        return []
    ids = np.array([c[0] for c in cands], dtype=np.int64)
    dists = np.array([c[1] for c in cands], dtype=np.float64)
    _sort_candidates(ids, dists, ids.size)
    out = np.empty(config.max_degree, dtype=np.int64)
    a = config.alpha_for(metric) if alpha is None else alpha
    kept = _prune(node, ids, dists, ids.size, x, metric_code(metric), a, config.max_degree, out)
    return out[:kept].tolist()


def search_vectors(index: GraphIndex, vectors, query, params: SearchParams,
                   metric: str = "inner_product") -> tuple[np.ndarray, np.ndarray]:
    """Compiled best-first search over a float matrix; returns (ids, scores)."""
    n = index.node_count
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    x = vectors if (vectors.dtype == np.float32 and vectors.flags.c_contiguous) else np.ascontiguousarray(vectors, np.float32)
    q = np.ascontiguousarray(query, dtype=np.float64)
    if q.shape != (x.shape[1],):
        raise ValidationError(f"query has shape {q.shape}, expected ({x.shape[1]},)")
    visited = np.zeros(n, dtype=np.int64)
    pool_ids = np.empty(params.window, dtype=np.int64)
    pool_d = np.empty(params.window, dtype=np.float64)
    no_log = np.empty(0, dtype=np.int64)
    size, _ = _beam_search(index.neighbors, index.degrees, index.entry, x, q, metric_code(metric),
                           params.window, visited, 1, pool_ids, pool_d, no_log, no_log.astype(np.float64))
    size = min(size, params.candidates_out)
    return pool_ids[:size].copy(), -pool_d[:size]
