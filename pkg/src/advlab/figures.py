"""Figure rendering for reports and training curves (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from advlab.evaluation import EvalReport, load_curves  # noqa: E402


def plot_training_curves(curve_files: dict[str, str], out_path,
                         title: str = "Training curves"):
    """Render standard/robust accuracy over epochs for one or more runs.

    curve_files maps a legend label to a curve CSV path.
    """
    fig, (ax_std, ax_rob) = plt.subplots(1, 2, figsize=(9, 3.5), sharex=True)
    for label, path in curve_files.items():
        curves = load_curves(path)
        ax_std.plot(curves["epoch"], curves["std_acc"], label=label)
        ax_rob.plot(curves["epoch"], curves["robust_acc"], label=label)
    ax_std.set_title("standard accuracy")
    ax_rob.set_title("robust accuracy (probe attack)")
    for ax in (ax_std, ax_rob):
        ax.set_xlabel("epoch")
        ax.set_ylim(0, 1)
        ax.grid(alpha=0.3)
    ax_std.set_ylabel("accuracy")
    ax_rob.legend(fontsize=8)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_report(report: EvalReport, out_path):
    """Bar chart of per-attack accuracy next to the standard accuracy."""
    names = ["standard"] + list(report.rows)
    values = [report.standard_accuracy] + [
        r["accuracy"] for r in report.rows.values()
    ]
    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(names), 3.5))
    bars = ax.bar(names, values, color=["#666"] + ["#1f77b4"] * len(report.rows))
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 0.01, f"{v:.2f}",
                ha="center", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title(f"robustness report {report.checkpoint_id}".strip())
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
