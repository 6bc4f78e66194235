"""Ground truth, recall and the throughput harness."""

from __future__ import annotations

import csv
import io
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ValidationError
from .graph import SearchParams
from .scoring import exact_scores, top_k

CSV_FIELDS = ("W", "candidates_out", "recall_at_10", "qps", "wall_ms")


@dataclass(frozen=True)
class GroundTruth:
    ids: np.ndarray  # m x K, best first
    metric: str

    @property
    def depth(self) -> int:
        return self.ids.shape[1]

    def __len__(self):
        return self.ids.shape[0]


def _data_matrix(x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return np.ascontiguousarray(x)


def brute_force_topk(data, queries, k: int, metric: str = "inner_product", threads: int = 1) -> GroundTruth:
    """Exact top-``k`` per query by a full scan, ties broken by smaller id."""
    x = _data_matrix(data)
    q = np.asarray(queries, dtype=np.float64)
    if x.ndim != 2 or q.ndim != 2 or x.shape[1] != q.shape[1]:
        raise ValidationError(f"shape mismatch: data {x.shape}, queries {q.shape}")
    if not 1 <= k <= x.shape[0]:
        raise ValidationError(f"k must lie in [1, n={x.shape[0]}], got {k}")
    ids = np.arange(x.shape[0], dtype=np.int64)

    def one(row):
        scores = exact_scores(x, row, None, metric)
        return top_k(ids, scores, k)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, q))
    else:
        rows = [one(row) for row in q]
    out = np.array(rows, dtype=np.int64).reshape(q.shape[0], k)
    return GroundTruth(out, metric)


def recall(result_ids, truth_ids, k: int) -> float:
    """k-recall@k: overlap of the first ``k`` of each list, divided by ``k``."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    s = list(result_ids)[:k]
    g = list(truth_ids)[:k]
    if len(s) < k or len(g) < k:
        raise ValidationError(f"need at least k={k} ids in both lists, got {len(s)} and {len(g)}")
    return len(set(s) & set(g)) / k


def mean_recall(results, truth: GroundTruth, k: int) -> float:
    if len(results) != len(truth):
        raise ValidationError(f"{len(results)} results for {len(truth)} ground-truth rows")
    if not results:
        raise ValidationError("no results to score")
    return float(np.mean([recall(r.ids, t, k) for r, t in zip(results, truth.ids)]))


@dataclass
class BenchRow:
    W: int  # noqa: N815
    candidates_out: int
    recall_at_10: float
    qps: float
    wall_ms: float


@dataclass
class BenchReport:
    k: int
    runs: int
    rows: list[BenchRow] = field(default_factory=list)

    def to_csv(self, dest=None) -> str:
        """Render as CSV; also write it to ``dest`` (a path) when given."""
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in asdict(row).items()})
        text = buf.getvalue()
        if dest == "-":
            sys.stdout.write(text)
        elif dest is not None:
            with open(dest, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def bench(index, queries, truth: GroundTruth | None, sweep, k: int = 10, runs: int = 10,
          threads: int = 1) -> BenchReport:
    """Time every ``(W, candidates_out)`` configuration over all queries.

    Each configuration runs ``runs`` times; QPS and wall time come from the
    fastest run, recall from the first (results do not change between runs).
    """
    from .pipeline import search_batch

    if truth is None:
        raise ValidationError("bench needs ground truth")
    queries = np.asarray(queries, dtype=np.float64)
    if len(truth) != queries.shape[0]:
        raise ValidationError(f"ground truth has {len(truth)} rows for {queries.shape[0]} queries")
    if truth.depth < k:
        raise ValidationError(f"ground truth depth {truth.depth} < k={k}")
    if runs < 1:
        raise ValidationError("runs must be >= 1")
    report = BenchReport(k=k, runs=runs)
    for window, cands in sweep:
        params = SearchParams(window=int(window), candidates_out=int(cands))
        best = float("inf")
        rec = None
        for _ in range(runs):
            t0 = time.perf_counter()
            results = search_batch(index, queries, k, params, threads=threads)
            best = min(best, time.perf_counter() - t0)
            if rec is None:
                rec = mean_recall(results, truth, k)
        best = max(best, 1e-9)
        report.rows.append(BenchRow(params.window, params.candidates_out, rec, queries.shape[0] / best, best * 1e3))
    return report
