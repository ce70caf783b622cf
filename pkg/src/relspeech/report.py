"""Report rendering: aligned text tables, key=value lines, and figures.

Every CLI report path emits the machine-readable ``key=value`` lines
next to a human-oriented table, and renders matplotlib figures to files
alongside them.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def format_table(headers: list[str], rows: list[list]) -> str:
    """Plain-text table with columns padded to their widest cell."""
    cells = [[str(h) for h in headers]]
    for row in rows:
        cells.append([f"{v:.4f}" if isinstance(v, float) else str(v) for v in row])
    widths = [max(len(r[c]) for r in cells) for c in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def format_key_values(pairs: dict) -> str:
    return "\n".join(f"{k}={_fmt(v)}" for k, v in pairs.items())


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def parse_metric_log(lines: list[str]):
    """Split tab-separated training log lines into plottable columns."""
    steps, losses, lrs = [], [], []
    eval_steps, ppls = [], []
    for line in lines:
        parts = line.rstrip("\n").split("\t")
        steps.append(int(parts[0]))
        lrs.append(float(parts[2]))
        losses.append(float(parts[3]))
        if len(parts) > 4:
            eval_steps.append(int(parts[0]))
            ppls.append(float(parts[4]))
    return steps, losses, lrs, eval_steps, ppls


def plot_training_curves(log_lines: list[str], path) -> Path:
    """Loss and learning-rate curves (plus validation perplexity if logged)."""
    steps, losses, lrs, eval_steps, ppls = parse_metric_log(log_lines)
    fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_loss.plot(steps, losses, lw=1.0, label="train loss")
    if eval_steps:
        ax_loss.plot(eval_steps, [min(p, max(losses) * 2) for p in ppls],
                     "o-", ms=3, lw=0.8, label="val ppl (clipped)")
    ax_loss.set_xlabel("update")
    ax_loss.set_ylabel("per-token loss")
    ax_loss.legend(frameon=False, fontsize=8)
    ax_lr.plot(steps, lrs, lw=1.0, color="tab:orange")
    ax_lr.set_xlabel("update")
    ax_lr.set_ylabel("learning rate")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_mode_comparison(summary: dict, path) -> Path:
    """Grouped bars: token error per mode under standard and shifted pads.

    ``summary`` maps mode name to a dict with ter_standard / ter_shifted
    / degradation entries (means over seeds).
    """
    modes = list(summary)
    x = range(len(modes))
    width = 0.35
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    std = [summary[m]["ter_standard"] for m in modes]
    shifted = [summary[m]["ter_shifted"] for m in modes]
    ax.bar([i - width / 2 for i in x], std, width, label="standard pads")
    ax.bar([i + width / 2 for i in x], shifted, width, label="shifted pads")
    for i, m in enumerate(modes):
        ax.annotate(f"Δ={summary[m]['degradation']:+.3f}",
                    (i, max(std[i], shifted[i])),
                    ha="center", va="bottom", fontsize=8)
    ax.set_xticks(list(x))
    ax.set_xticklabels(modes)
    ax.set_ylabel("token error rate")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
