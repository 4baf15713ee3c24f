"""Charts for analysis reports, rendered to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from ..attack_analysis import AblationReport  # noqa: E402


def ablation_chart(report: AblationReport, path: Path | str) -> Path:
    """Bar chart of minimal-attack counts with each constraint removed in turn."""
    labels = ["all constraints"] + [f"without\n{r.removed}" for r in report.rows]
    counts = [len(report.base_attacks)] + [len(r.attacks) for r in report.rows]
    colors = ["#4c72b0" if c == 0 else "#c44e52" for c in counts]
    fig, ax = plt.subplots(figsize=(max(6.0, 1.4 * len(labels)), 4.0))
    bars = ax.bar(range(len(labels)), counts, color=colors)
    ax.bar_label(bars, labels=[str(c) for c in counts])
    ax.set_xticks(range(len(labels)), labels, fontsize=8)
    ax.set_ylabel("minimal attacks")
    ax.set_title("Attacks admitted per constraint ablation")
    ax.set_ylim(0, max(counts + [1]) * 1.2)
    fig.tight_layout()
    path = Path(path)
    # fixed metadata keeps the file byte-stable across runs
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
