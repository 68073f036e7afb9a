"""Figure rendering for the report paths: coefficient trajectories,
training curves, and the suite comparison chart. Files only (Agg);
nothing here opens a window."""

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

DPI = 120


def plot_lambda_trajectories(trajectory: list[dict], path: str) -> None:
    """One line per (vector, layer group); x is the snapshot step."""
    steps = [s["step"] for s in trajectory]
    tasks = sorted(trajectory[0].get("lambda", {})) if trajectory else []
    fig, axes = plt.subplots(1, max(1, len(tasks)),
                             figsize=(5.0 * max(1, len(tasks)), 3.6),
                             squeeze=False, sharey=True)
    for ax, task in zip(axes[0], tasks):
        series = [snap["lambda"][task] for snap in trajectory]
        groups = len(series[0])
        for layer in range(groups):
            label = "front-end" if layer == 0 else f"block {layer}"
            ax.plot(steps, [row[layer] for row in series], label=label)
        ax.set_title(f"merging coefficients: {task}")
        ax.set_xlabel("step")
        ax.set_ylabel("lambda")
        ax.axhline(0.5, color="gray", lw=0.6, ls=":")
        if groups <= 8:
            ax.legend(fontsize=7)
    if not tasks:
        axes[0][0].set_title("no task vectors")
        axes[0][0].set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_training_curves(metrics_csv: str, path: str) -> None:
    """Loss per split, plus whatever validation metrics the CSV has."""
    rows = list(csv.DictReader(open(metrics_csv)))
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for split in ("train", "valid"):
        pts = [(int(r["epoch"]), float(r["loss"])) for r in rows
               if r["split"] == split and r["loss"]]
        if pts:
            ax_loss.plot(*zip(*pts), label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    for column in ("uar", "macro_f1", "token_error_rate"):
        pts = [(int(r["epoch"]), float(r[column])) for r in rows
               if r["split"] == "valid" and r[column]]
        if pts:
            ax_metric.plot(*zip(*pts), label=column)
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylabel("validation metric")
    ax_metric.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def plot_suite_comparison(report: dict, path: str) -> None:
    """UAR per setup with its bootstrap interval as error bars."""
    names = [n for n in report["order"]
             if "metrics" in report["setups"][n]]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(names)), 4.0))
    if names:
        points = [report["setups"][n]["metrics"]["uar"]["point"]
                  for n in names]
        lo = [p - report["setups"][n]["metrics"]["uar"]["ci_lo"]
              for n, p in zip(names, points)]
        hi = [report["setups"][n]["metrics"]["uar"]["ci_hi"] - p
              for n, p in zip(names, points)]
        ax.bar(range(len(names)), points, yerr=[lo, hi], capsize=3,
               color="#4878a8")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels([report["setups"][n]["label"] for n in names],
                           rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("UAR")
    ax.set_title("setup comparison (95% CI)")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
