"""Figure rendering for the report paths (sweeps, audits, ROC curves)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_sweep(rows: list[dict], path, title: str = "") -> None:
    """Detection performance vs the sweep value: AUC and TPR@fixed-FPR curves."""
    values = [row["value"] for row in rows]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(values, [r["auc"] for r in rows], marker="o", label="ROC-AUC")
    for key, label in (("tpr_at_0.01", "TPR@1%FPR"), ("tpr_at_0.1", "TPR@10%FPR")):
        if key in rows[0]:
            ax.plot(values, [r[key] for r in rows], marker="s", label=label)
    if "auc_ci_low" in rows[0]:
        ax.fill_between(
            values,
            [r["auc_ci_low"] for r in rows],
            [r["auc_ci_high"] for r in rows],
            alpha=0.2,
        )
    ax.set_xlabel(rows[0].get("axis", "value"))
    ax.set_ylabel("detection performance")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_roc(curve, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(4.8, 4.4))
    xs = [p[0] for p in curve.points]
    ys = [p[1] for p in curve.points]
    ax.plot(xs, ys, label=f"AUC = {curve.auc:.4f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="gray", alpha=0.5)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_audit_trace(outcome, gamma: float, path, title: str = "") -> None:
    """Cumulative z across the audit's queries, against the decision threshold."""
    import math

    tokens = 0
    greens = 0
    zs = []
    for record in outcome.queries:
        tokens += record.token_count
        greens += record.green_count
        if tokens:
            zs.append((greens - gamma * tokens) / math.sqrt(gamma * (1 - gamma) * tokens))
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(range(1, len(zs) + 1), zs, marker="o", label="cumulative z")
    ax.axhline(outcome.report.eta, color="red", linestyle="--", label=f"eta = {outcome.report.eta:.3f}")
    ax.set_xlabel("queries used")
    ax.set_ylabel("z statistic")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
