"""Delimited report files and the matplotlib figures rendered next to them."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from kgforge.evaluation import Comparison, EvalReport
from kgforge.training import TrainLog

_DPI = 150


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_tsv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(_cell(c) for c in row) + "\n")


def save_training_curves(log: TrainLog, path) -> bool:
    """Loss curves per epoch with validation hits@10 on a second axis."""
    if not log.epochs:
        return False
    epochs = [e.epoch for e in log.epochs]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(epochs, [e.loss_total for e in log.epochs], label="total loss", color="C0")
    ax.plot(epochs, [e.loss_tri for e in log.epochs], label="triple loss", color="C1", ls="--")
    if any(e.loss_bi for e in log.epochs):
        ax.plot(epochs, [e.loss_bi for e in log.epochs], label="pair loss", color="C2", ls=":")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.grid(alpha=0.3)
    evals = [(e.epoch, e.val_hits10) for e in log.epochs if e.val_hits10 is not None]
    if evals:
        ax2 = ax.twinx()
        ax2.plot(*zip(*evals), "o-", color="C3", label="validation hits@10")
        ax2.set_ylabel("validation hits@10")
        lines, labels = ax.get_legend_handles_labels()
        lines2, labels2 = ax2.get_legend_handles_labels()
        ax.legend(lines + lines2, labels + labels2, loc="best", fontsize=8)
    else:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return True


def save_relation_hits_figure(report: EvalReport, path, top: int = 20) -> bool:
    """Grouped hits@1 bars per relation, split by prediction direction."""
    rows = sorted(report.relations, key=lambda s: -s.count)[:top]
    if not rows:
        return False
    names = [s.name if len(s.name) <= 28 else s.name[:25] + "..." for s in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6, 0.45 * len(rows)), 4.5))
    if any(s.hits1_head is not None for s in rows):
        ax.bar(x - 0.2, [s.hits1_head or 0.0 for s in rows], width=0.4, label="head prediction")
        ax.bar(x + 0.2, [s.hits1_tail for s in rows], width=0.4, label="tail prediction")
    else:
        ax.bar(x, [s.hits1_tail for s in rows], width=0.6, label="tail prediction")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("hits@1")
    ax.set_title(f"hits@1 by relation (top {len(rows)} by test count)")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return True


def save_gain_figure(comparison: Comparison, path, top: int = 20) -> bool:
    """Horizontal bars of per-relation correct-at-1 gains, largest first."""
    rows = [g for g in comparison.gains if g.gain != 0][:top] or comparison.gains[:top]
    if not rows:
        return False
    names = [g.name if len(g.name) <= 28 else g.name[:25] + "..." for g in rows]
    y = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, max(3, 0.3 * len(rows) + 1.5)))
    colors = ["C2" if g.gain >= 0 else "C3" for g in rows]
    ax.barh(y, [g.gain for g in rows], color=colors)
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("correctly ranked-first triples: second minus first checkpoint")
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return True


def save_sweep_figure(rows, x_label: str, path) -> bool:
    """hits@10 against a swept parameter, one line per training variant.

    rows: iterable of (value, variant, hits10).
    """
    rows = list(rows)
    if not rows:
        return False
    variants: dict[str, list[tuple[float, float]]] = {}
    for value, variant, hits10 in rows:
        variants.setdefault(variant, []).append((value, hits10))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    markers = {"baseline": "D", "biased": "o", "joint": "x", "jobi": "s"}
    for variant, points in variants.items():
        points.sort()
        xs, ys = zip(*points)
        ax.plot(xs, ys, marker=markers.get(variant, "o"), label=variant)
    xs_all = sorted({v for v, _, _ in rows})
    ax.set_xscale("log")
    ax.set_xticks(xs_all)
    ax.set_xticklabels([str(int(v)) for v in xs_all])
    ax.minorticks_off()
    ax.set_xlabel(x_label)
    ax.set_ylabel("test hits@10")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return True


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
