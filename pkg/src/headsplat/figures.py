"""Report figures written next to the delimited outputs (bench JSON, loss CSV)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .blending import FRAME_STAGES

_STAGE_COLORS = {
    "dynamic_generation": "#4c72b0",
    "color_fusion": "#dd8452",
    "position_sampling": "#55a868",
    "rendering": "#c44e52",
}


def save_bench_figure(report, path) -> None:
    """Stacked per-frame stage bars plus a median breakdown panel."""
    frames = np.arange(len(report.per_frame))
    fig, (ax, ax_med) = plt.subplots(
        1, 2, figsize=(10, 4), gridspec_kw={"width_ratios": [3, 1]}
    )
    bottom = np.zeros(len(frames))
    for stage in FRAME_STAGES:
        values = np.array([r[stage] for r in report.per_frame]) / 1000.0
        ax.bar(frames, values, bottom=bottom, label=stage, color=_STAGE_COLORS[stage], width=0.8)
        bottom += values
    ax.set_xlabel("frame")
    ax.set_ylabel("time [ms]")
    ax.set_title("per-frame stage breakdown")
    ax.legend(fontsize=8)

    medians = [report.stages[s]["median_us"] / 1000.0 for s in FRAME_STAGES]
    ax_med.barh(
        range(len(FRAME_STAGES)),
        medians,
        color=[_STAGE_COLORS[s] for s in FRAME_STAGES],
    )
    ax_med.set_yticks(range(len(FRAME_STAGES)))
    ax_med.set_yticklabels(FRAME_STAGES, fontsize=7)
    ax_med.set_xlabel("median [ms]")
    ax_med.invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_loss_figure(trace: list[dict], path) -> None:
    """Semi-log refinement loss curve."""
    iterations = [row["iteration"] for row in trace]
    totals = [row["total"] for row in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(iterations, totals, lw=1.5)
    ax.set_xlabel("iteration")
    ax.set_ylabel("weighted L2 loss")
    ax.set_title("refinement loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
