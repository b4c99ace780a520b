"""Report figures. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    # fixed metadata so repeated renders give identical files
    "svg.hashsalt": "cimseg",
}


def _size(scale=1.0, ratio=None):
    ratio = ratio or (np.sqrt(5.0) - 1.0) / 2.0
    width = 5.5 * scale
    return (width, width * ratio)


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_branch_quality(rows: list[dict], path: Path) -> Path:
    """Seeds vs pseudo ground truth mean IoU per refinement branch."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size(0.8))
        k = np.array([r["branch"] for r in rows])
        width = 0.38
        ax.bar(k - width / 2, [r["seed_iou"] for r in rows], width, label="seeds", color="#7b5ea7")
        ax.bar(k + width / 2, [r["pseudo_gt_iou"] for r in rows], width, label="pseudo GT", color="#c0392b")
        ax.set_xticks(k)
        ax.set_xlabel("refinement branch")
        ax.set_ylabel("mean IoU with instance")
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def plot_pr_curves(curves: dict, path: Path) -> Path:
    """``curves`` maps threshold -> {category: (recall, precision)}."""
    with plt.rc_context(STYLE):
        thresholds = sorted(curves)
        fig, axes = plt.subplots(1, len(thresholds), figsize=_size(1.6, 0.3), sharey=True)
        for ax, t in zip(np.atleast_1d(axes), thresholds):
            for c, (rec, prec) in sorted(curves[t].items()):
                ax.step(np.concatenate(([0.0], rec)), np.concatenate(([1.0], prec)),
                        where="post", label=f"cat {c}")
            ax.set_title(f"IoU > {t:g}")
            ax.set_xlim(0, 1.02)
            ax.set_ylim(0, 1.05)
            ax.set_xlabel("recall")
        np.atleast_1d(axes)[0].set_ylabel("precision")
        np.atleast_1d(axes)[-1].legend(frameon=False, loc="lower left")
        return _save(fig, path)


def plot_losses(loss: dict, path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size(0.8))
        comp = loss["components"]
        k = np.arange(1, len(loss["l_ref"]) + 1)
        ax.bar(k, comp["classification"], label="classification", color="#2e86c1")
        ax.bar(k, comp["integrity"], bottom=comp["classification"], label="integrity", color="#f39c12")
        ax.set_xticks(k)
        ax.set_xlabel("refinement branch")
        ax.set_ylabel("loss")
        ax.set_title(f"anti-noise: bce {comp['bce']:.3f}, pcl {comp['pcl']:.3f}")
        ax.legend(frameon=False)
        return _save(fig, path)
