"""Figure rendering for the analyze path. All figures go straight to PNG
files via the Agg backend; nothing here opens a window."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import DiagReport


def plot_rank_histogram(report: DiagReport, path) -> None:
    """Bar chart of where the k-th constrained neighbor sits in the
    unconstrained ranking; doubling buckets on the x axis."""
    labels = report.rank_hist.labels()
    counts = report.rank_hist.counts
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(range(len(counts)), counts, color="#4878cf")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_xlabel("unconstrained rank of constrained neighbor "
                  f"#{report.k}")
    ax.set_ylabel("queries")
    ax.set_title(f"mode={report.mode}  median={report.median_kth_rank:g}  "
                 f"bank={report.bank_size}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _epoch_series(metrics: list[dict], key: str) -> tuple[list[int], list[float]]:
    xs, ys = [], []
    for rec in metrics:
        val = rec.get(key)
        if val is not None:
            xs.append(rec["epoch"])
            ys.append(float(val))
    return xs, ys


def plot_metric_curve(metrics: list[dict], key: str, path, ylabel: str,
                      title: str = "") -> None:
    xs, ys = _epoch_series(metrics, key)
    fig, ax = plt.subplots(figsize=(7, 4))
    if xs:
        ax.plot(xs, ys, marker="o", markersize=3, color="#d65f5f")
    else:
        ax.text(0.5, 0.5, f"no {key!r} values recorded", ha="center",
                va="center", transform=ax.transAxes)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss_curve(metrics: list[dict], path, title: str = "") -> None:
    plot_metric_curve(metrics, "loss", path, "training loss", title)


def plot_purity_curve(metrics: list[dict], path, title: str = "") -> None:
    plot_metric_curve(metrics, "purity", path, "neighbor purity", title)
