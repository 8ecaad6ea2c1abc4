"""Figure rendering for the CLI: every delimited output gets a picture.

Uses the Agg backend so runs work headless; figures are written next to the
CSV/JSONL files they visualize and never replace them as the data of record.
"""

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  backend must be pinned first

import numpy as np  # noqa: E402

from .errors import ParameterError  # noqa: E402
from .metrics import RoundRecord  # noqa: E402
from .toy_sim import SweepRow  # noqa: E402

_DPI = 120


def save_rank_curve_figure(rows: Sequence[SweepRow], path: str | Path) -> None:
    """Held-out MSE against total rank budget, one curve per adapter mode."""
    if not rows:
        raise ParameterError("no sweep rows to plot")
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for mode, marker in (("shared", "o"), ("per_task", "s")):
        pts = sorted((r for r in rows if r.mode == mode),
                     key=lambda r: r.rank)
        if not pts:
            continue
        ranks = [r.rank for r in pts]
        means = [r.mean_mse for r in pts]
        stds = [r.std_mse for r in pts]
        label = "single shared adapter" if mode == "shared" \
            else "one adapter per task"
        ax.errorbar(ranks, means, yerr=stds, marker=marker, capsize=3,
                    label=label)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("total rank budget")
    ax.set_ylabel("held-out MSE")
    ax.set_title("fit error vs. rank budget")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_round_trends_figure(records: Sequence[RoundRecord],
                             path: str | Path) -> None:
    """Per-task evaluation loss and clustering quality across rounds."""
    if not records:
        raise ParameterError("no round records to plot")
    records = sorted(records, key=lambda r: r.round_index)
    rounds = [r.round_index for r in records]
    task_ids = sorted(records[0].per_task_eval_loss)
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.0, 6.0), sharex=True)
    for tid in task_ids:
        ax1.plot(rounds, [r.per_task_eval_loss.get(tid, float("nan"))
                          for r in records], marker=".", label=f"task {tid}")
    ax1.set_ylabel("evaluation loss")
    ax1.set_title("per-task loss and clustering quality by round")
    ax1.legend(fontsize="small")
    ax1.grid(True, alpha=0.3)
    ax2.plot(rounds, [r.cluster_accuracy for r in records], marker=".",
             label="cluster accuracy")
    ax2.plot(rounds, [r.purity for r in records], marker=".", label="purity")
    ax2.set_ylim(-0.05, 1.05)
    ax2.set_xlabel("round")
    ax2.set_ylabel("fraction")
    ax2.legend(fontsize="small")
    ax2.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_projection_figure(round_index: int,
                           rows: Sequence[tuple[int, str, int, int]],
                           coords: np.ndarray, path: str | Path) -> None:
    """2-D adapter scatter: color = assigned cluster, marker = true task."""
    if len(rows) != len(coords):
        raise ParameterError("rows and coords must align")
    if len(rows) == 0:
        raise ParameterError("no uploads to plot")
    markers = "osD^vP*X"
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    task_ids = sorted({task_id for _, _, task_id, _ in rows})
    for tid in task_ids:
        idx = [i for i, (_, _, t, _) in enumerate(rows) if t == tid]
        xy = coords[idx]
        colors = [cmap(rows[i][3] % 10) for i in idx]
        ax.scatter(xy[:, 0], xy[:, 1], c=colors,
                   marker=markers[task_ids.index(tid) % len(markers)],
                   edgecolors="black", linewidths=0.4, s=48,
                   label=f"task {tid}")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(f"uploaded adapters, round {round_index}\n"
                 "(marker = true task, color = assigned cluster)")
    ax.legend(fontsize="small")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_cluster_trend_figure(trend: Sequence[Mapping[str, float]],
                              path: str | Path) -> None:
    """Offline clustering re-evaluation: accuracy/purity/inertia by round."""
    if not trend:
        raise ParameterError("no trend rows to plot")
    rounds = [row["round"] for row in trend]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(rounds, [row["accuracy"] for row in trend], marker="o",
            label="accuracy")
    ax.plot(rounds, [row["purity"] for row in trend], marker="s",
            label="purity")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("round")
    ax.set_ylabel("fraction")
    ax2 = ax.twinx()
    ax2.plot(rounds, [row["inertia"] for row in trend], marker=".",
             color="gray", alpha=0.6, label="inertia")
    ax2.set_ylabel("inertia", color="gray")
    handles1, labels1 = ax.get_legend_handles_labels()
    handles2, labels2 = ax2.get_legend_handles_labels()
    ax.legend(handles1 + handles2, labels1 + labels2, fontsize="small",
              loc="center right")
    ax.set_title("clustering quality recomputed offline")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
