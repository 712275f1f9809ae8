"""Figures for a finished run: BF/AF accuracy bars, loop traces, layer selection frequency."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalReport  # noqa: E402


def plot_bf_af(rows: Sequence[EvalReport], path) -> Path:
    labels, bf, af = [], [], []
    for r in rows:
        labels += [f"{r.target_class}\ntarget", f"{r.target_class}\nother"]
        bf += [r.target_acc_bf, r.other_acc_bf]
        af += [r.target_acc_af, r.other_acc_af]
    x = range(len(labels))
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 3.2))
    ax.bar([i - 0.2 for i in x], bf, width=0.4, label="BF")
    ax.bar([i + 0.2 for i in x], af, width=0.4, label="AF")
    ax.set_xticks(list(x), labels, fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_traces(traces: dict, path) -> Path:
    """Synthetic accuracy, loss and sigma per update for every target that has loop traces."""
    loops = {k: v for k, v in traces.items() if "acc_trace" in v}
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for name, t in loops.items():
        axes[0].plot(t["acc_trace"], label=name)
        axes[1].plot(t["loss_trace"], label=name)
        axes[2].plot(t["sigma_trace"], label=name)
    for ax, title in zip(axes, ("synthetic accuracy", "loss", "sigma")):
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("update", fontsize=8)
    if loops:
        axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_selection(traces: dict, path, top: int = 25) -> Path:
    counts: dict[str, int] = {}
    for t in traces.values():
        for name, c in t.get("selection_counts", {}).items():
            counts[name] = counts.get(name, 0) + c
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    fig, ax = plt.subplots(figsize=(6, 0.25 * max(len(ranked), 4) + 1))
    ax.barh([n for n, _ in ranked][::-1], [c for _, c in ranked][::-1])
    ax.set_xlabel("times selected")
    ax.tick_params(axis="y", labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_figures(rows: Sequence[EvalReport], traces_path, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    traces = json.loads(Path(traces_path).read_text()) if traces_path and Path(traces_path).exists() else {}
    paths = [plot_bf_af(rows, out_dir / "accuracy_bf_af.png")]
    if any("acc_trace" in t for t in traces.values()):
        paths.append(plot_traces(traces, out_dir / "traces.png"))
        paths.append(plot_selection(traces, out_dir / "layer_selection.png"))
    return paths
