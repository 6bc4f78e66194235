"""Command-line entry point: ``leanvec {train,build,search,ground-truth,bench}``."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import eval as ev
from . import plotting, storage
from .errors import StorageError, ValidationError
from .graph import DEFAULT_ALPHA, IP, L2, GraphBuildConfig, SearchParams
from .pipeline import IndexConfig, build_index, search_batch, store_name
from .projection import MODES, fit_projection

METRICS = {"ip": "inner_product", "l2": "euclidean", "cosine": "inner_product"}
GT_MIN_DEPTH = 100


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--data", metavar="PATH", help="database vectors (.fvecs) (default: none)")
    g.add_argument("--queries", metavar="PATH", help="training/calibration queries (.fvecs) (default: none)")
    g.add_argument("--test-queries", metavar="PATH", help="queries to search or report on (.fvecs) (default: none)")
    g.add_argument("--metric", choices=sorted(METRICS), default="ip", help="similarity (default: %(default)s)")
    g.add_argument("--dim", type=int, metavar="D_OUT", help="target dimensionality d (default: none)")
    g.add_argument("--mode", choices=MODES, default="id", help="projection learner (default: %(default)s)")
    g.add_argument("--b1", type=int, choices=(4, 8), default=8, help="primary LVQ bits (default: %(default)s)")
    g.add_argument("--b2", type=int, choices=(0, 8), default=0, help="primary second-level bits (default: %(default)s)")
    g.add_argument("--secondary", choices=("f32", "f16", "lvq8"), default="f32",
                   help="secondary store encoding (default: %(default)s)")
    g.add_argument("--graph-degree", type=int, default=128, metavar="R", help="max out-degree (default: %(default)s)")
    g.add_argument("--build-window", type=int, default=200, metavar="L", help="build search window (default: %(default)s)")
    g.add_argument("--prune-alpha", type=float, default=None,
                   help=f"pruning alpha (default: {DEFAULT_ALPHA[L2]} for l2, {DEFAULT_ALPHA[IP]} for ip/cosine)")
    g.add_argument("--search-window", type=_int_list, default=[50], metavar="W[,W...]",
                   help="search window; bench sweeps a comma-separated list (default: 50)")
    g.add_argument("--rerank", type=int, default=50, metavar="N",
                   help="candidates re-ranked with secondary vectors (default: %(default)s)")
    g.add_argument("--k", type=int, default=10, help="neighbors returned (default: %(default)s)")
    g.add_argument("--runs", type=int, default=10, help="bench repetitions, best one reported (default: %(default)s)")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads (default: available cores)")
    g.add_argument("--seed", type=int, default=0, help="graph build seed (default: %(default)s)")
    g.add_argument("--out", metavar="PATH", help="output file; CSV goes to stdout when omitted (default: none)")
    g.add_argument("--index", metavar="PATH", help="index bundle (.lvec) (default: none)")
    g.add_argument("--projection", metavar="PATH", help="trained projection file (default: none)")
    g.add_argument("--truth", metavar="PATH", help="ground truth (.ivecs) for bench (default: none)")
    g.add_argument("--report", action="store_true",
                   help="also write a JSON summary and PNG figures next to the output (default: off)")
    return p


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="leanvec", description="Dimensionality-reduced, quantized graph search.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND", parser_class=_Parser)
    common = _common()
    helps = {
        "train": "learn a projection (writes a projection file and a JSON report)",
        "build": "build an index bundle (.lvec)",
        "search": "search an index, writing CSV rows query,rank,id,score",
        "ground-truth": "exact top-K neighbors by brute force (writes .ivecs)",
        "bench": "recall/QPS sweep over search windows (writes CSV)",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def _validate(args):
    if args.metric == "l2" and args.mode == "ood-fw":
        raise UsageError("--metric l2 cannot be combined with --mode ood-fw: euclidean search needs "
                         "the same projection on both sides (A == B); use --mode id or ood-es")
    for name in ("graph_degree", "build_window", "rerank", "k", "runs", "threads"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1")


def _load_vectors(path, normalize=False) -> np.ndarray:
    x = storage.read_vecs(path, "fvecs")
    if x.size == 0:
        raise ValidationError(f"{path} holds no vectors")
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    return x


def _side_path(out, suffix: str) -> Path:
    base = Path(out) if out and out != "-" else Path("leanvec")
    return base.with_name(base.stem + suffix)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, default=float) + "\n", encoding="utf-8")


def _train(args):
    _require(args, "data", "dim")
    if args.mode != "id":
        _require(args, "queries")
    cosine = args.metric == "cosine"
    data = _load_vectors(args.data, cosine)
    queries = _load_vectors(args.queries, cosine) if args.queries else None
    t0 = time.perf_counter()
    result = fit_projection(args.mode, data, args.dim, queries, workers=args.threads)
    return result, time.perf_counter() - t0


def cmd_train(args):
    result, seconds = _train(args)
    out = args.out or "projection.lvpj"
    storage.save_projection(result.pair, out)
    summary = result.summary() | {"seconds": seconds, "projection": str(out)}
    _write_json(_side_path(out, ".json"), summary)
    if args.report:
        if result.convergence is not None:
            plotting.plot_convergence(result.convergence, _side_path(out, "_convergence.png"))
        if result.beta is not None:
            plotting.plot_beta_profile(result.beta_trace, result.beta, _side_path(out, "_beta.png"))
    return 0


def cmd_build(args):
    _require(args, "data")
    if args.projection:
        pair = storage.load_projection(args.projection)
    else:
        _require(args, "dim")
        pair = _train(args)[0].pair
    data = _load_vectors(args.data, args.metric == "cosine")
    config = IndexConfig(
        primary_b1=args.b1, primary_b2=args.b2, secondary=args.secondary,
        graph=GraphBuildConfig(args.graph_degree, args.build_window, args.prune_alpha),
        seed=args.seed, threads=args.threads,
    )
    t0 = time.perf_counter()
    index = build_index(data, pair, METRICS[args.metric], config)
    seconds = time.perf_counter() - t0
    out = args.out or "index.lvec"
    storage.save_index(index, out)
    if args.report:
        _write_json(_side_path(out, ".json"), {
            "n": len(index), "D": pair.D, "d": pair.d, "metric": index.metric,
            "mean_degree": float(index.graph.degrees.mean()), "build_seconds": seconds,
            "primary": store_name(index.primary), "secondary": store_name(index.secondary),
        })
    return 0


def _test_queries(args, dim: int) -> np.ndarray:
    path = args.test_queries or args.queries
    if not path:
        raise UsageError(f"{args.command} requires --test-queries (or --queries)")
    q = _load_vectors(path, args.metric == "cosine")
    if q.shape[1] != dim:
        raise ValidationError(f"queries have dimension {q.shape[1]}, index expects {dim}")
    return q


def _check_index_metric(args, index):
    if METRICS[args.metric] != index.metric:
        raise ValidationError(f"index was built for {index.metric}, but --metric {args.metric} was given")


def cmd_search(args):
    _require(args, "index")
    index = storage.load_index(args.index)
    _check_index_metric(args, index)
    queries = _test_queries(args, index.projection.D)
    params = SearchParams(args.search_window[0], args.rerank)
    results = search_batch(index, queries, args.k, params, threads=args.threads)
    fh = sys.stdout if not args.out or args.out == "-" else open(args.out, "w", encoding="utf-8", newline="")
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query", "rank", "id", "score"])
        for qi, res in enumerate(results):
            for rank, (i, s) in enumerate(zip(res.ids.tolist(), res.scores.tolist())):
                writer.writerow([qi, rank, i, repr(s)])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def cmd_ground_truth(args):
    _require(args, "data", "out")
    data = _load_vectors(args.data, args.metric == "cosine")
    queries = _test_queries(args, data.shape[1])
    depth = min(max(args.k, GT_MIN_DEPTH), data.shape[0])
    truth = ev.brute_force_topk(data, queries, depth, METRICS[args.metric], threads=args.threads)
    storage.write_vecs(args.out, truth.ids.astype(np.int32), "ivecs")
    return 0


def cmd_bench(args):
    _require(args, "index")
    index = storage.load_index(args.index)
    _check_index_metric(args, index)
    queries = _test_queries(args, index.projection.D)
    if args.truth:
        truth = ev.GroundTruth(storage.read_vecs(args.truth, "ivecs").astype(np.int64), index.metric)
    elif args.data:
        data = _load_vectors(args.data, args.metric == "cosine")
        truth = ev.brute_force_topk(data, queries, args.k, index.metric, threads=args.threads)
    else:
        raise UsageError("bench requires --truth or --data to score recall")
    sweep = []
    for w in args.search_window:
        cands = min(args.rerank, w)
        if cands < args.k:
            raise UsageError(f"search window {w} leaves fewer than --k={args.k} candidates")
        sweep.append((w, cands))
    report = ev.bench(index, queries, truth, sweep, k=args.k, runs=args.runs, threads=args.threads)
    report.to_csv(args.out or "-")
    if args.report:
        _write_json(_side_path(args.out, ".json"), {
            "k": report.k, "runs": report.runs, "threads": args.threads,
            "rows": [vars(r) for r in report.rows],
        })
        plotting.plot_recall_qps(report, _side_path(args.out, "_recall_qps.png"))
    return 0


COMMANDS = {
    "train": cmd_train,
    "build": cmd_build,
    "search": cmd_search,
    "ground-truth": cmd_ground_truth,
    "bench": cmd_bench,
}


def run(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        _validate(args)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"leanvec {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"leanvec {args.command}: invalid input: {exc}", file=sys.stderr)
        return 1
    except (StorageError, OSError) as exc:
        print(f"leanvec {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
