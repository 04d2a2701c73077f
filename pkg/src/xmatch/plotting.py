"""Figure rendering for the CLI report paths (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import roc_points  # noqa: E402


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def plot_roc(
    curves: Mapping[str, tuple[Sequence[float], Sequence[int], float]],
    title: str,
    path: str | Path,
) -> Path:
    """One ROC line per model; ``curves`` maps model name to (scores, labels, auc)."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for name, (scores, labels, auc) in curves.items():
        fpr, tpr = roc_points(scores, labels)
        ax.plot(fpr, tpr, drawstyle="steps-post", label=f"{name} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", linestyle=":", linewidth=1)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out


def plot_roc_per_dataset(
    scored: Mapping[str, Mapping[str, tuple[Sequence[float], Sequence[int], float]]],
    fig_dir: str | Path,
) -> list[Path]:
    """``scored`` maps dataset name to the per-model curves; one PNG per dataset."""
    out_dir = Path(fig_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [plot_roc(curves, ds, out_dir / f"roc_{_safe(ds)}.png") for ds, curves in scored.items()]


def plot_loss(losses: Sequence[float], path: str | Path, title: str = "training loss") -> Path:
    losses = np.asarray(losses, dtype=float)
    steps = np.arange(1, len(losses) + 1)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(steps, losses, linewidth=0.6, alpha=0.4, label="per step")
    w = min(25, len(losses))
    if w > 1:
        smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
        ax.plot(steps[w - 1 :], smooth, linewidth=1.5, label=f"mean of last {w}")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return out
