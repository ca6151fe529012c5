"""Report figures, written next to the CSV/JSON tables they summarize."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path).with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Lookahead acceptance against n-gram size, one line per corpus.

    Sequential rows are drawn as a dashed reference at their acceptance.
    """
    fig, ax = plt.subplots(figsize=(5, 3.5))
    corpora = list(dict.fromkeys(r["corpus"] for r in rows))
    for corpus in corpora:
        la = sorted((r["n"], r["acceptance"]) for r in rows
                    if r["corpus"] == corpus and r["mode"] == "lookahead")
        if la:
            ax.plot([n for n, _ in la], [a for _, a in la], marker="o", label=f"{corpus} lookahead")
    seq = [r["acceptance"] for r in rows if r["mode"] == "sequential"]
    if seq:
        ax.axhline(seq[0], color="grey", ls="--", lw=1, label="sequential")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_xlabel("n-gram size")
    ax.set_ylabel("tokens per round trip")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_projection(rows: Sequence[Mapping], path: str | Path) -> Path:
    """Measured vs projected tok/s over injected RTT, per mode."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode in dict.fromkeys(r["mode"] for r in rows):
        pts = sorted((r["rtt_measured_ms"], r["measured_tok_s"], r["projected_tok_s"])
                     for r in rows if r["mode"] == mode)
        line, = ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{mode} measured")
        ax.plot([p[0] for p in pts], [p[2] for p in pts], ls="--", color=line.get_color(),
                label=f"{mode} projected")
    ax.set_xlabel("RTT (ms)")
    ax.set_ylabel("tokens / s")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_depth_sweep(report, path: str | Path) -> Path:
    """Attack top-1/top-5 accuracy by split depth with the chance levels."""
    rows = sorted(report.rows, key=lambda r: r["depth"])
    depths = [r["depth"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(depths, [r["top1_accuracy"] for r in rows], marker="o", label="top-1")
    ax.plot(depths, [r["top5_accuracy"] for r in rows], marker="s", label="top-5")
    ax.axhline(report.random_top1, color="grey", ls=":", lw=1, label="chance top-1")
    ax.axhline(report.random_top5, color="grey", ls="--", lw=1, label="chance top-5")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_xlabel("layers run locally before the split")
    ax.set_ylabel("token recovery accuracy")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)
