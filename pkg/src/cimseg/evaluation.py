"""Mask mAP at fixed IoU thresholds, VOC style with all-points interpolation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .masks import BinaryMask, MaskSet, iou, mask_nms

THRESHOLDS = (0.25, 0.5, 0.7, 0.75)


@dataclass(frozen=True)
class Prediction:
    mask: BinaryMask
    category: int
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"prediction score must be finite, got {self.score}")
        if self.mask.area == 0:
            raise ValueError("prediction mask is empty")

    def to_dict(self) -> dict:
        return {"cat": self.category, "score": self.score, "mask": self.mask.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> Prediction:
        return cls(BinaryMask.from_dict(data["mask"]), int(data["cat"]), float(data["score"]))


def match_predictions(preds: Sequence[Prediction], gts: Sequence[tuple[BinaryMask, int]],
                      iou_threshold: float) -> list[bool]:
    """Greedy TP/FP flags for predictions already sorted by descending score.

    Each prediction takes the unmatched same-category ground truth with the
    highest IoU (lowest index on ties) when that IoU exceeds the threshold.
    """
    for a, b in zip(preds, preds[1:]):
        if b.score > a.score:
            raise ValueError("predictions must be sorted by descending score")
    taken = [False] * len(gts)
    flags = []
    for p in preds:
        best, best_iou = -1, -1.0
        for g, (mask, cat) in enumerate(gts):
            if taken[g] or cat != p.category:
                continue
            v = iou(p.mask, mask)
            if v > best_iou:
                best, best_iou = g, v
        hit = best >= 0 and best_iou > iou_threshold
        if hit:
            taken[best] = True
        flags.append(hit)
    return flags


def pr_curve(flags: Sequence[bool], num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(np.asarray(flags, dtype=float))
    ranks = np.arange(1, len(flags) + 1)
    recall = tp / num_gt if num_gt else np.zeros_like(tp)
    return recall, tp / ranks


def average_precision(flags: Sequence[bool], num_gt: int) -> float | None:
    """Area under the monotone precision envelope; ``None`` when there is no ground truth."""
    if num_gt <= 0:
        return None
    recall, precision = pr_curve(flags, num_gt)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalResult:
    thresholds: tuple[float, ...]
    ap: dict[float, dict[int, float]] = field(default_factory=dict)
    mean_ap: dict[float, float] = field(default_factory=dict)
    curves: dict[float, dict[int, tuple[np.ndarray, np.ndarray]]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "mAP": {_key(t): self.mean_ap[t] for t in self.thresholds},
            "AP": {_key(t): {str(c): v for c, v in sorted(self.ap[t].items())} for t in self.thresholds},
        }

    def curve_rows(self) -> list[tuple]:
        rows = []
        for t in self.thresholds:
            for c, (rec, prec) in sorted(self.curves[t].items()):
                rows.extend((t, c, r + 1, float(rec[r]), float(prec[r])) for r in range(len(rec)))
        return rows


def _key(t: float) -> str:
    return f"mAP_{round(t * 100):02d}"


def evaluate(preds: Sequence[Prediction], gts: Sequence[tuple[BinaryMask, int]],
             thresholds: Sequence[float] = THRESHOLDS) -> EvalResult:
    """Per-category AP and mAP over the categories present in the ground truth."""
    result = EvalResult(tuple(thresholds))
    cats = sorted({c for _, c in gts})
    by_cat = {}
    for c in cats:
        mine = [p for p in preds if p.category == c]
        by_cat[c] = sorted(mine, key=lambda p: -p.score)  # stable: ties keep input order
    for t in thresholds:
        result.ap[t], result.curves[t] = {}, {}
        for c in cats:
            num_gt = sum(1 for _, gc in gts if gc == c)
            flags = match_predictions(by_cat[c], gts, t)
            result.ap[t][c] = average_precision(flags, num_gt)
            result.curves[t][c] = pr_curve(flags, num_gt)
        vals = list(result.ap[t].values())
        result.mean_ap[t] = float(np.mean(vals)) if vals else float("nan")
    return result


def predictions_from_scores(scores: np.ndarray, proposals: MaskSet, nms_threshold: float = 0.5,
                            min_score: float = 1e-3) -> list[Prediction]:
    """Per-category predictions from a fused N x (C+1) score table, thinned by mask NMS."""
    preds = []
    for c in range(1, scores.shape[1]):
        col = scores[:, c]
        ranked = [int(i) for i in np.argsort(-col, kind="stable")
                  if col[i] > min_score and proposals[int(i)].area]
        for i in mask_nms(ranked, proposals, nms_threshold):
            preds.append(Prediction(proposals[i], c, float(col[i])))
    return preds
