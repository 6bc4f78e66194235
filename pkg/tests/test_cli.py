import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from leanvec.cli import make_parser, run
from leanvec.datasets import make_dataset
from leanvec.storage import load_index, load_projection, read_vecs, write_vecs

SNAPSHOTS = Path(__file__).parent / "snapshots"
FLAGS = ["--data", "--queries", "--test-queries", "--metric", "--dim", "--mode", "--b1", "--b2", "--secondary",
         "--graph-degree", "--build-window", "--prune-alpha", "--search-window", "--rerank", "--k", "--runs",
         "--threads", "--seed", "--out", "--index", "--projection", "--truth", "--report"]
GRAPH = ["--graph-degree", "32", "--build-window", "64", "--threads", "1"]


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = make_dataset(5000, 64, 16, n_learn=300, n_test=200, ood="subspace", decay=0.0, seed=11)
    write_vecs(root / "data.fvecs", ds.data)
    write_vecs(root / "learn.fvecs", ds.learn_queries)
    write_vecs(root / "test.fvecs", ds.test_queries)
    return root


def help_text(capsys, argv):
    with pytest.raises(SystemExit) as info:
        run(argv)
    assert info.value.code == 0
    return capsys.readouterr().out


class TestHelp:
    @pytest.mark.parametrize("command", ["train", "build", "search", "ground-truth", "bench"])
    def test_snapshot(self, capsys, monkeypatch, command):
        monkeypatch.setenv("COLUMNS", "100")
        out = help_text(capsys, [command, "--help"])
        assert out == (SNAPSHOTS / f"help_{command}.txt").read_text()
        for flag in FLAGS:
            assert flag in out
        assert out.count("(default:") == len(FLAGS)

    def test_top_level(self, capsys, monkeypatch):
        monkeypatch.setenv("COLUMNS", "100")
        assert help_text(capsys, ["--help"]) == (SNAPSHOTS / "help.txt").read_text()

    def test_defaults(self):
        args = make_parser().parse_args(["build"])
        assert (args.graph_degree, args.build_window, args.k, args.runs, args.prune_alpha) == (128, 200, 10, 10, None)


class TestErrors:
    def test_l2_with_ood_fw(self, files, capsys):
        code = run(["search", "--metric", "l2", "--mode", "ood-fw", "--index", str(files / "x.lvec")])
        assert code == 1
        assert "A == B" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        with pytest.raises(SystemExit) as info:
            run(["train", "--bogus"])
        assert info.value.code == 1
        assert "unrecognized" in capsys.readouterr().err

    def test_missing_required(self, capsys):
        assert run(["train", "--dim", "4"]) == 1
        assert "--data" in capsys.readouterr().err

    def test_ood_needs_queries(self, files):
        assert run(["train", "--mode", "ood-es", "--data", str(files / "data.fvecs"), "--dim", "8"]) == 1

    def test_missing_file_is_io_error(self, tmp_path):
        assert run(["train", "--data", str(tmp_path / "none.fvecs"), "--dim", "4"]) == 2

    def test_corrupt_index_is_io_error(self, tmp_path, files):
        (tmp_path / "bad.lvec").write_bytes(b"LVEC" + bytes(200))
        assert run(["search", "--index", str(tmp_path / "bad.lvec"), "--test-queries", str(files / "test.fvecs")]) == 2

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "leanvec", "bench", "--nope"], capture_output=True, text=True)
        assert proc.returncode == 1


class TestWorkflow:
    def test_train_id(self, files, tmp_path):
        out = tmp_path / "p.lvpj"
        assert run(["train", "--mode", "id", "--data", str(files / "data.fvecs"), "--dim", "16", "--out", str(out)]) == 0
        pair = load_projection(out)
        assert pair.shared and pair.orthonormal
        assert np.array_equal(pair.a, pair.b)
        assert np.allclose(pair.a @ pair.a.T, np.eye(16), atol=1e-8)
        summary = json.loads((tmp_path / "p.json").read_text())
        assert summary["mode"] == "id" and summary["d"] == 16

    @pytest.mark.parametrize("mode,figure", [("ood-fw", "_convergence.png"), ("ood-es", "_beta.png")])
    def test_train_report_figures(self, files, tmp_path, mode, figure):
        out = tmp_path / "p.lvpj"
        argv = ["train", "--mode", mode, "--data", str(files / "data.fvecs"), "--queries", str(files / "learn.fvecs"),
                "--dim", "16", "--out", str(out), "--report"]
        assert run(argv) == 0
        png = tmp_path / ("p" + figure)
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
        summary = json.loads((tmp_path / "p.json").read_text())
        assert ("convergence" in summary) == (mode == "ood-fw")

    def test_end_to_end(self, files, tmp_path):
        proj, index, truth = tmp_path / "p.lvpj", tmp_path / "i.lvec", tmp_path / "gt.ivecs"
        data, learn, test = (str(files / f) for f in ("data.fvecs", "learn.fvecs", "test.fvecs"))
        assert run(["train", "--mode", "ood-fw", "--data", data, "--queries", learn, "--dim", "16", "--out", str(proj)]) == 0
        assert run(["build", "--data", data, "--projection", str(proj), "--out", str(index), "--report", *GRAPH]) == 0
        assert json.loads((tmp_path / "i.json").read_text())["n"] == 5000
        assert run(["ground-truth", "--data", data, "--test-queries", test, "--out", str(truth), "--threads", "1"]) == 0
        gt = read_vecs(truth)
        assert gt.shape == (200, 100)

        hits = tmp_path / "s.csv"
        assert run(["search", "--index", str(index), "--test-queries", test, "--k", "5", "--out", str(hits)]) == 0
        rows = list(csv.DictReader(hits.open()))
        assert len(rows) == 200 * 5 and list(rows[0]) == ["query", "rank", "id", "score"]

        bench_csv = tmp_path / "b.csv"
        argv = ["bench", "--index", str(index), "--test-queries", test, "--truth", str(truth), "--search-window",
                "20,50", "--runs", "2", "--out", str(bench_csv), "--report", "--threads", "1"]
        assert run(argv) == 0
        table = list(csv.DictReader(bench_csv.open()))
        assert list(table[0]) == ["W", "candidates_out", "recall_at_10", "qps", "wall_ms"]
        at50 = next(r for r in table if r["W"] == "50")
        assert float(at50["recall_at_10"]) >= 0.95
        assert (tmp_path / "b_recall_qps.png").exists() and (tmp_path / "b.json").exists()

    def test_build_reproducible(self, files, tmp_path):
        argv = ["build", "--data", str(files / "data.fvecs"), "--dim", "8", "--seed", "3", *GRAPH]
        assert run([*argv, "--out", str(tmp_path / "a.lvec")]) == 0
        assert run([*argv, "--out", str(tmp_path / "b.lvec")]) == 0
        assert (tmp_path / "a.lvec").read_bytes() == (tmp_path / "b.lvec").read_bytes()

    def test_cosine_and_l2(self, files, tmp_path):
        for metric in ("cosine", "l2"):
            out = tmp_path / f"{metric}.lvec"
            argv = ["build", "--metric", metric, "--data", str(files / "data.fvecs"), "--dim", "8", "--out", str(out),
                    "--secondary", "lvq8", *GRAPH]
            assert run(argv) == 0
            assert load_index(out).metric == ("euclidean" if metric == "l2" else "inner_product")
        # an index built for l2 refuses ip queries
        code = run(["search", "--index", str(tmp_path / "l2.lvec"), "--test-queries", str(files / "test.fvecs")])
        assert code == 1

    def test_search_to_stdout(self, files, tmp_path, capsys):
        out = tmp_path / "i.lvec"
        run(["build", "--data", str(files / "data.fvecs"), "--dim", "8", "--out", str(out), *GRAPH])
        capsys.readouterr()
        assert run(["search", "--index", str(out), "--test-queries", str(files / "test.fvecs"), "--k", "1"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "query,rank,id,score" and len(lines) == 201
