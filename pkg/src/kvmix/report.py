"""Report rendering: delimited output plus matplotlib figures.

Every report-producing CLI command writes machine-readable JSON and CSV;
the figures are a convenience rendering of the same numbers.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1))


def write_csv(rows: list[dict], path, fieldnames: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def render_sweep_curve(curve, chosen: float, baseline: float, path) -> None:
    budgets = [b for b, _ in curve]
    scores = [s for _, s in curve]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(budgets, scores, marker="o", lw=1.2)
    ax.axvline(chosen, color="tab:red", ls="--", lw=1, label=f"chosen B = {chosen:g}")
    ax.axhline(baseline, color="tab:gray", ls=":", lw=1, label="B = 4 baseline")
    ax.set_xlabel("average bitwidth budget B")
    ax.set_ylabel("calibration-set output MSE")
    ax.set_yscale("log" if min(scores) > 0 else "linear")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_replay_mse(request_ids, mses, realized_avgs, path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    x = range(len(request_ids))
    ax1.bar(x, mses, color="tab:blue")
    ax1.set_xticks(list(x))
    ax1.set_xticklabels(request_ids, rotation=45, ha="right", fontsize=7)
    ax1.set_ylabel("attention output MSE")
    ax2.bar(x, realized_avgs, color="tab:orange")
    ax2.set_xticks(list(x))
    ax2.set_xticklabels(request_ids, rotation=45, ha="right", fontsize=7)
    ax2.set_ylabel("realized avg bitwidth")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
