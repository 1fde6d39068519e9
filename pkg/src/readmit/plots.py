"""Matplotlib figures written next to the CSV/JSON reports.

PNG metadata is stripped so that reruns produce byte-identical files.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "readmit",
}


def _save(fig, path):
    fig.savefig(path, dpi=150, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def auc_comparison(reports, path, metric: str = "auc"):
    """Per-split values for each model with the mean and 95% CI."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(reports), 3.2))
        rng = np.random.default_rng(0)
        for k, rep in enumerate(reports):
            vals = np.asarray(rep.values(metric))
            ax.scatter(k + rng.uniform(-0.12, 0.12, len(vals)), vals, s=12, alpha=0.6, color=f"C{k}")
            agg = rep.aggregates[metric]
            if agg["half_width"] is not None:
                ax.errorbar(k + 0.3, agg["mean"], yerr=agg["half_width"], fmt="o", color="black", capsize=3, ms=4)
            else:
                ax.plot(k + 0.3, agg["mean"], "o", color="black", ms=4)
        ax.set_xticks(range(len(reports)), [r.model for r in reports])
        ax.set_xlim(-0.6, len(reports) - 0.2)
        ax.set_ylabel(metric.upper() if metric == "auc" else metric.replace("_", " "))
        ax.set_title(f"{metric.upper() if metric == 'auc' else metric} over {len(reports[0].repeats)} splits")
        _save(fig, path)


def ablation_chart(rows, path):
    """Mean AUC with 95% CI per feature variant."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 0.45 * len(rows) + 1.0))
        y = np.arange(len(rows))[::-1]
        means = np.array([r["auc_mean"] for r in rows])
        lo = np.array([r["auc_ci_low"] if r["auc_ci_low"] is not None else r["auc_mean"] for r in rows])
        hi = np.array([r["auc_ci_high"] if r["auc_ci_high"] is not None else r["auc_mean"] for r in rows])
        ax.errorbar(means, y, xerr=[means - lo, hi - means], fmt="o", color="C0", capsize=3, ms=4)
        ax.set_yticks(y, [r["variant"] for r in rows])
        ax.set_xlabel("mean AUC (95% CI)")
        _save(fig, path)
