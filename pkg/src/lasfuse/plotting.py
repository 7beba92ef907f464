"""Report figures.  Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import MODE_LABELS  # noqa: E402


def _finish(fig, ax, path) -> Path:
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def wer_bars(metrics: dict, path, split: str = "test") -> Path:
    """Grouped bars per system: first-pass WER, oracle WER and rescored WER."""
    systems = list(metrics["systems"])
    top1 = [100 * metrics["systems"][m][split]["top1"]["rate"] for m in systems]
    oracle = [100 * metrics["systems"][m][split]["oracle"]["rate"] for m in systems]
    resc = [100 * metrics["systems"][m]["rescore"][split]["top1"]["rate"] if "rescore" in metrics["systems"][m]
            else np.nan for m in systems]
    x = np.arange(len(systems))
    fig, ax = plt.subplots(figsize=(8, 4))
    w = 0.27
    ax.bar(x - w, top1, w, label="first pass", color="#4c72b0")
    ax.bar(x, resc, w, label="rescored", color="#55a868")
    ax.bar(x + w, oracle, w, label="oracle", color="#c44e52")
    base = top1[systems.index("none")] if "none" in systems else None
    if base is not None:
        ax.axhline(base, color="0.4", lw=0.8, ls="--")
    ax.set_xticks(x)
    ax.set_xticklabels([MODE_LABELS.get(m, m) for m in systems], rotation=20, ha="right")
    ax.set_ylabel(f"{split} WER (%)")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, ax, path)


def tuning_curve(grid: list, path, knob: str = "lm_weight", title: str = "") -> Path:
    """Dev WER against one knob, best over the other knobs at each value."""
    best: dict[float, float] = {}
    for row in grid:
        v = row[knob]
        best[v] = min(best.get(v, np.inf), row["dev_wer"])
    xs = sorted(best)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, [100 * best[v] for v in xs], "o-", color="#4c72b0")
    ax.set_xlabel(knob.replace("_", " "))
    ax.set_ylabel("dev WER (%)")
    if title:
        ax.set_title(title, fontsize=10)
    return _finish(fig, ax, path)


def training_curves(histories: dict, path) -> Path:
    """Dev greedy WER per epoch for every trained system."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, h in histories.items():
        ep = h.get("epochs") or []
        if not ep:
            continue
        xs = [e["epoch"] for e in ep]
        ys = [100 * e["dev_wer"] for e in ep]
        if "initial" in h:
            xs, ys = [0] + xs, [100 * h["initial"]["dev_wer"]] + ys
        ax.plot(xs, ys, marker=".", label=MODE_LABELS.get(mode, mode))
    ax.set_xlabel("epoch")
    ax.set_ylabel("dev greedy WER (%)")
    ax.set_ylim(0, 110)
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, ax, path)
