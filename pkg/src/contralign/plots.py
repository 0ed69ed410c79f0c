"""Matplotlib figure rendering next to the CSV/JSON outputs.

Everything here is presentation only: figures are regenerated from the
delimited files and report payloads, never the other way around.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .trainer import read_loss_trace


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_run_figures(out_dir, report) -> list:
    """loss_curves.png and accuracy_curves.png for one experiment."""
    plt = _pyplot()
    out = Path(out_dir)
    written = []

    traces = {}
    for entry in report.per_seed:
        if entry["trace_csv"] is None:
            continue
        path = out / entry["trace_csv"]
        if path.exists():
            traces[entry["seed"]] = read_loss_trace(path)
    if traces:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for name, color in (
            ("l_total", "tab:blue"),
            ("l_sup", "tab:orange"),
            ("l_clu", "tab:green"),
            ("l_ins", "tab:red"),
        ):
            for i, rows in enumerate(traces.values()):
                ax.plot(
                    [r.step for r in rows],
                    [getattr(r, name) for r in rows],
                    color=color,
                    alpha=0.35,
                    linewidth=0.8,
                    label=name if i == 0 else None,
                )
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(f"loss components ({report.config['train.variant']})")
        ax.legend(loc="upper right")
        fig.tight_layout()
        target = out / "loss_curves.png"
        fig.savefig(target, dpi=120)
        plt.close(fig)
        written.append(target)

    curves = [e["evals"] for e in report.per_seed if e["status"] == "ok" and e["evals"]]
    if curves:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for i, evals in enumerate(curves):
            steps = [row[0] for row in evals]
            ax.plot(steps, [row[1] for row in evals], color="tab:purple",
                    alpha=0.5, linewidth=0.9, label="val" if i == 0 else None)
            ax.plot(steps, [row[2] for row in evals], color="tab:cyan",
                    alpha=0.5, linewidth=0.9, label="test" if i == 0 else None)
        ax.set_xlabel("step")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0.0, 1.02)
        ax.set_title("validation / test accuracy per seed")
        ax.legend(loc="lower right")
        fig.tight_layout()
        target = out / "accuracy_curves.png"
        fig.savefig(target, dpi=120)
        plt.close(fig)
        written.append(target)
    return written


def render_grid_figure(out_dir, axis_names, cells) -> list:
    """ablation.png: errorbars over a numeric axis, bars otherwise."""
    plt = _pyplot()
    out = Path(out_dir)
    means, stds, labels = [], [], []
    for cell in cells:
        agg = cell.report.aggregate["best_test_accuracy"]
        if agg["mean"] is None:
            continue
        means.append(agg["mean"])
        stds.append(agg["std"])
        labels.append("/".join(str(cell.values[n]) for n in axis_names))
    if not means:
        return []

    fig, ax = plt.subplots(figsize=(7, 4.5))
    numeric_axis = len(axis_names) == 1 and all(
        isinstance(c.values[axis_names[0]], (int, float)) for c in cells
    )
    if numeric_axis:
        xs = [float(lbl) for lbl in labels]
        ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3)
        ax.set_xlabel(axis_names[0])
    else:
        xs = np.arange(len(means))
        ax.bar(xs, means, yerr=stds, capsize=3, color="tab:blue")
        ax.set_xticks(xs)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_xlabel("/".join(axis_names))
    ax.set_ylabel("test accuracy (best-val checkpoint)")
    ax.set_ylim(0.0, 1.02)
    ax.set_title("ablation: mean ± std over seeds")
    fig.tight_layout()
    target = out / "ablation.png"
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return [target]


def render_dataset_figure(split, path) -> list:
    """Scatter of the first two feature dimensions, color = class, marker = role."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 6))
    groups = (
        (split.source_x, split.source_y, "o", 0.45, "source"),
        (split.target_unlabeled_x, None, ".", 0.25, "target unlabeled"),
        (split.target_labeled_x, split.target_labeled_y, "*", 1.0, "target labeled"),
    )
    cmap = plt.get_cmap("tab10")
    for x, y, marker, alpha, name in groups:
        if x.shape[0] == 0:
            continue
        xs = x[:, 0]
        ys = x[:, 1] if x.shape[1] > 1 else np.zeros_like(xs)
        colors = "gray" if y is None else [cmap(int(c) % 10) for c in y]
        size = 90 if marker == "*" else 12
        ax.scatter(xs, ys, c=colors, marker=marker, alpha=alpha, s=size, label=name)
    ax.set_xlabel("feature 0")
    ax.set_ylabel("feature 1")
    ax.set_title("split overview (standardized coordinates)")
    ax.legend(loc="best")
    fig.tight_layout()
    target = Path(path)
    fig.savefig(target, dpi=120)
    plt.close(fig)
    return [target]
