"""Two-phase query path: graph search on reduced vectors, exact re-rank.

A query is projected once with ``a``. The graph is walked using the primary
store (``b``-projected database vectors, optionally LVQ-compressed), and the
surviving candidates are re-scored against the full-dimensional secondary
store with the original query.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import graph as graph_mod
from .errors import ValidationError
from .graph import GraphBuildConfig, GraphIndex, SearchParams
from .lvq import LvqStore, fit_codec
from .projection import ProjectionPair
from .scoring import exact_scores, top_k

METRICS = ("inner_product", "euclidean")


@dataclass
class FloatStore:
    """Uncompressed vectors kept as float32.

    With ``half=True`` values are rounded through float16 on the way in, which
    models half-precision storage while scoring still runs in float32/64.
    """

    vectors: np.ndarray
    half: bool = False

    def __post_init__(self):
        v = np.asarray(self.vectors)
        if self.half:
            v = v.astype(np.float16)
        self.vectors = np.ascontiguousarray(v, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValidationError("a vector store needs an n x dim matrix")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def name(self) -> str:
        return "f16" if self.half else "f32"

    def decoded(self) -> np.ndarray:
        return self.vectors


def store_name(store) -> str:
    return store.name if isinstance(store, FloatStore) else store.codec.name


@dataclass(frozen=True)
class QueryResult:
    ids: np.ndarray  # int64, best first
    scores: np.ndarray  # float64 similarities; negated squared distance for euclidean

    def __len__(self):
        return self.ids.shape[0]


@dataclass(frozen=True)
class IndexConfig:
    """How to build the stores and the graph.

    ``primary_b1 = None`` keeps the reduced vectors uncompressed.
    """

    primary_b1: int | None = 8
    primary_b2: int = 0
    secondary: str = "f32"  # "f32", "f16" or "lvq8"
    graph: GraphBuildConfig = field(default_factory=GraphBuildConfig)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.secondary not in ("f32", "f16", "lvq8"):
            raise ValidationError(f"secondary store must be 'f32', 'f16' or 'lvq8', got {self.secondary!r}")


@dataclass
class LeanVecIndex:
    projection: ProjectionPair
    primary: FloatStore | LvqStore
    secondary: FloatStore | LvqStore
    graph: GraphIndex
    metric: str
    query_projections: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        check_metric(self.metric, self.projection)
        if self.primary.dim != self.projection.d:
            raise ValidationError(f"primary dimension {self.primary.dim} != projection d {self.projection.d}")
        if self.secondary.dim != self.projection.D:
            raise ValidationError(f"secondary dimension {self.secondary.dim} != projection D {self.projection.D}")
        if not len(self.primary) == len(self.secondary) == self.graph.node_count:
            raise ValidationError("primary store, secondary store and graph disagree on the vector count")
        self._secondary_rows = _materialize(self.secondary)

    def __len__(self):
        return len(self.secondary)

    def project_query(self, q: np.ndarray) -> np.ndarray:
        with self._lock:
            self.query_projections += 1
        return self.projection.project_queries(q)


def _materialize(store) -> np.ndarray:
    if isinstance(store, FloatStore):
        return store.vectors
    return np.ascontiguousarray(store.decode_rows(np.arange(len(store))))


def check_metric(metric: str, projection: ProjectionPair) -> None:
    if metric not in METRICS:
        raise ValidationError(f"metric must be one of {METRICS}, got {metric!r}")
    if metric == "euclidean" and not projection.shared:
        raise ValidationError(
            "euclidean search needs the same projection on both sides (a == b); "
            "||Aq - Bx|| does not track ||q - x|| otherwise, use an id or ood-es projection"
        )


def build_index(data, projection: ProjectionPair, metric: str = "inner_product",
                config: IndexConfig | None = None) -> LeanVecIndex:
    config = config or IndexConfig()
    check_metric(metric, projection)
    x = np.asarray(data)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("build_index needs a non-empty n x D matrix")
    if x.shape[1] != projection.D:
        raise ValidationError(f"data dimension {x.shape[1]} != projection D {projection.D}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("data contains non-finite values")
    reduced = projection.project_data(x)
    if config.primary_b1 is None:
        primary = FloatStore(reduced)
    else:
        primary = LvqStore.encode(fit_codec(reduced, config.primary_b1, config.primary_b2), reduced)
    if config.secondary in ("f32", "f16"):
        secondary = FloatStore(x, half=config.secondary == "f16")
    else:
        secondary = LvqStore.encode(fit_codec(x, 8, 0), x)
    g = graph_mod.build(primary.decoded(), config.graph, metric=metric, seed=config.seed, threads=config.threads)
    return LeanVecIndex(projection, primary, secondary, g, metric)


def _check_query(index: LeanVecIndex, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.projection.D,):
        raise ValidationError(f"query has shape {q.shape}, expected ({index.projection.D},)")
    if not np.all(np.isfinite(q)):
        raise ValidationError("query contains non-finite values")
    return q


def candidates(index: LeanVecIndex, q, params: SearchParams) -> np.ndarray:
    """Graph-search candidate ids (best first by approximate score)."""
    q = _check_query(index, q)
    reduced = index.project_query(q)
    ids, _ = graph_mod.search_vectors(index.graph, index.primary.decoded(), reduced, params, index.metric)
    return ids


def rerank(candidate_ids, q, secondary, k: int, metric: str = "inner_product") -> QueryResult:
    """Exact re-scoring of candidates; top ``k`` by (-score, id)."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    rows = secondary if isinstance(secondary, np.ndarray) else _materialize(secondary)
    ids = np.asarray(candidate_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= rows.shape[0]):
        raise ValidationError("candidate id out of range")
    scores = exact_scores(rows, q, ids, metric)
    pos = top_k(ids, scores, k)
    return QueryResult(ids[pos], scores[pos])


def search(index: LeanVecIndex, q, k: int, params: SearchParams) -> QueryResult:
    if k < 1:
        raise ValidationError("k must be >= 1")
    k = min(k, len(index))
    if params.candidates_out < k:
        raise ValidationError(f"candidates_out ({params.candidates_out}) must be >= k ({k})")
    q = _check_query(index, q)
    return rerank(candidates(index, q, params), q, index._secondary_rows, k, index.metric)


def search_batch(index: LeanVecIndex, queries, k: int, params: SearchParams, threads: int = 1) -> list[QueryResult]:
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2:
        raise ValidationError("queries must be an m x D matrix")
    if threads <= 1:
        return [search(index, q, k, params) for q in queries]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda q: search(index, q, k, params), queries))
