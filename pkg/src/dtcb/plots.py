"""Figures for run and sweep reports, written next to the tab-delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STATE_LEVELS = {"Absent": 0, "Locked": 1, "Active": 2, "Invalidated": 3}


def _level(states: str) -> int:
    # several records of one asset on a chain collapse to the most usable state
    return max((STATE_LEVELS.get(s, 0) for s in states.split("+")), default=0)


def plot_asset_timeline(timeline, chains, path, end_tick=None) -> Path:
    """Step chart of each asset's state on every chain over simulation time."""
    labels = sorted({label for _, label, _ in timeline})
    fig, axes = plt.subplots(
        max(len(labels), 1), 1, figsize=(7, 1.8 + 1.6 * max(len(labels), 1)), squeeze=False
    )
    for ax, label in zip(axes[:, 0], labels or ["(none)"]):
        points = [(t, dict(summary)) for t, lab, summary in timeline if lab == label]
        for offset, chain in enumerate(chains):
            xs, ys = [], []
            for t, per_chain in points:
                xs.append(t)
                ys.append(_level(per_chain.get(chain, "Absent")) + 0.06 * offset)
            if xs and end_tick is not None and end_tick > xs[-1]:
                xs.append(end_tick)
                ys.append(ys[-1])
            if xs:
                ax.step(xs, ys, where="post", label=chain, lw=1.6)
        ax.set_yticks(list(STATE_LEVELS.values()))
        ax.set_yticklabels(list(STATE_LEVELS))
        ax.set_ylim(-0.4, 3.5)
        ax.set_title(f"asset {label}", fontsize=10)
        ax.grid(alpha=0.3)
        ax.legend(loc="upper left", fontsize=8, frameon=False)
    axes[-1, 0].set_xlabel("tick")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(rows, path) -> Path:
    """Outcome counts and completion time across a fault sweep."""
    outcomes = {"completed": 0, "aborted": 0, "hazard": 0}
    done_ticks = []
    for row in rows:
        outcomes[row["outcome"]] += 1
        if row["outcome"] == "completed":
            done_ticks.append(row["ticks"])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.bar(list(outcomes), list(outcomes.values()), color=["#4c72b0", "#999999", "#c44e52"])
    ax1.set_ylabel("runs")
    ax1.set_title("outcomes", fontsize=10)
    if done_ticks:
        ax2.hist(done_ticks, bins=20, color="#4c72b0")
    ax2.set_xlabel("ticks to quiescence (completed runs)")
    ax2.set_title("completion time", fontsize=10)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
