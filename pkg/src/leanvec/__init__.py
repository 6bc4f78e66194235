"""Graph-based similarity search over dimensionality-reduced, LVQ-compressed vectors."""

from .errors import StorageError, ValidationError
from .eval import GroundTruth, bench, brute_force_topk, recall
from .graph import GraphBuildConfig, GraphIndex, SearchParams, greedy_search, robust_prune
from .linalg import GramPair
from .lvq import LvqCodec, LvqStore, fit_codec
from .pipeline import FloatStore, IndexConfig, LeanVecIndex, QueryResult, build_index, rerank, search, search_batch
from .projection import FwConfig, ProjectionPair, fit_projection, train_id, train_ood_es, train_ood_fw
from .storage import load_index, load_projection, read_vecs, save_index, save_projection, write_vecs

__all__ = [
    "FloatStore", "FwConfig", "GramPair", "GraphBuildConfig", "GraphIndex", "GroundTruth", "IndexConfig",
    "LeanVecIndex", "LvqCodec", "LvqStore", "ProjectionPair", "QueryResult", "SearchParams", "StorageError",
    "ValidationError", "bench", "brute_force_topk", "build_index", "fit_codec", "fit_projection", "greedy_search",
    "load_index", "load_projection", "read_vecs", "recall", "rerank", "robust_prune", "save_index",
    "save_projection", "search", "search_batch", "train_id", "train_ood_es", "train_ood_fw", "write_vecs",
]
