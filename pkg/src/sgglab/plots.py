"""Static plots for saved JSON artifacts (matplotlib, Agg backend)."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _dcs(ax, d):
    ax.plot(d["sampled_k"], [100 * v for v in d["metric_values"]], marker=".", label=d.get("metric", "metric"))
    if d.get("x_opt") is not None:
        y = 100 * d["metric_values"][d["sampled_k"].index(d["x_opt"])]
        ax.axvline(d["x_opt"], color="tab:red", linestyle="--")
        ax.annotate(f"k={d['x_opt']}, {y:.2f}", (d["x_opt"], y), textcoords="offset points", xytext=(6, -14))
    ax.set_xlabel("proposals per image (k)")
    ax.set_ylabel("F1@K (x100)")
    ax.set_title("Dynamic candidate selection")


def _latency(ax, d):
    ks = sorted(int(k) for k in d["budgets"])
    e2e = [d["budgets"][str(k)]["end_to_end"]["mean"] for k in ks]
    rel = [d["budgets"][str(k)]["stages"]["relation"]["mean"] for k in ks]
    ax.plot(ks, e2e, marker="o", label="end to end")
    ax.plot(ks, rel, marker="s", label="relation stage")
    ax.set_xlabel("proposals per image (k)")
    ax.set_ylabel("latency (ms, batch 1)")
    ax.set_title("Latency vs proposals")
    ax.legend()


def _report(ax, d):
    ks = sorted(d["recall"], key=int)
    x = range(len(ks))
    ax.bar([i - 0.2 for i in x], [100 * d["recall"][k] for k in ks], width=0.4, label="R@K")
    ax.bar([i + 0.2 for i in x], [100 * d["mean_recall"][k] for k in ks], width=0.4, label="mR@K")
    ax.set_xticks(list(x), [f"K={k}" for k in ks])
    ax.set_ylabel("x100")
    ax.set_title("Relation recall")
    ax.legend()


def _ablation(ax, d):
    rows = d["rows"]
    labels = [r["flags"] for r in rows]
    ax.bar(labels, [100 * r["mean_recall"]["20"] for r in rows])
    ax.set_ylabel("mR@20 (x100)")
    ax.set_title("Feature sources")


def plot_artifact(src: str | Path, out: str | Path) -> Path:
    """Render a DCS curve, latency sweep, metric report or ablation JSON."""
    d = json.loads(Path(src).read_text())
    if "sampled_k" in d:
        draw = _dcs
    elif "budgets" in d:
        draw = _latency
    elif "rows" in d:
        draw = _ablation
    elif "recall" in d:
        draw = _report
    else:
        raise ValueError(f"{src}: not a plottable artifact")
    fig, ax = plt.subplots(figsize=(6, 4))
    draw(ax, d)
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
