"""PNG figures for training and benchmark reports (Agg canvas, no pyplot)."""

from __future__ import annotations

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def _figure(width=6.0, height=4.0):
    fig = Figure(figsize=(width, height), dpi=100)
    FigureCanvasAgg(fig)
    return fig


def plot_convergence(report, path) -> None:
    """Loss and Frank-Wolfe gaps per iteration, log scale."""
    fig = _figure(8.0, 3.5)
    ax1, ax2 = fig.subplots(1, 2)
    ax1.plot(range(len(report.losses)), report.losses, marker=".", lw=1)
    if report.loss_after_retraction is not None:
        ax1.axhline(report.loss_after_retraction, color="tab:red", ls="--", lw=1, label="after retraction")
        ax1.legend()
    ax1.set_yscale("log")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    its = range(1, len(report.gaps_a) + 1)
    # zero gaps (e.g. the first A step from b = 0) have no place on a log axis
    ax2.plot(its, [g if g > 0 else float("nan") for g in report.gaps_a], label="gap A", lw=1)
    ax2.plot(its, [g if g > 0 else float("nan") for g in report.gaps_b], label="gap B", lw=1)
    ax2.set_yscale("log")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("Frank-Wolfe gap")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path)


def plot_beta_profile(trace, best_beta: float, path) -> None:
    """Loss at every blend weight the eigenvector search evaluated."""
    pts = sorted(trace)
    fig = _figure()
    ax = fig.subplots()
    ax.plot([b for b, _ in pts], [v for _, v in pts], marker="o", lw=1)
    ax.axvline(best_beta, color="tab:red", ls="--", lw=1, label=f"chosen beta = {best_beta:.3f}")
    ax.set_xlabel("beta")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)


def plot_recall_qps(report, path) -> None:
    """Throughput against recall for each swept configuration."""
    fig = _figure()
    ax = fig.subplots()
    rows = sorted(report.rows, key=lambda r: r.recall_at_10)
    ax.plot([r.recall_at_10 for r in rows], [r.qps for r in rows], marker="o", lw=1)
    for r in rows:
        ax.annotate(f"W={r.W}", (r.recall_at_10, r.qps), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel(f"{report.k}-recall@{report.k}")
    ax.set_ylabel("queries / second")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path)
