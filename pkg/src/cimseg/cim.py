"""Complete-instance mining over proposal masks.

One refinement branch consumes the previous branch's classification and
integrity tables (N x (C+1), column 0 is background) and produces:

1. seeds: per present category, the top ``p_seed`` share of proposals by
   classification score, thinned by greedy mask NMS;
2. pseudo ground truth: for every seed, the proposal that contains it
   (containment > ``tau_con``) with the highest integrity score;
3. refined labels: classification / integrity targets and loss weights for
   all proposals, from their best IoU against the pseudo ground truth, with
   thresholds raised by ``tau_cas`` per branch.

Ties in every sort and argmax resolve to the lower proposal index.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .masks import MaskSet, containment_matrix, cross_iou, mask_nms


@dataclass(frozen=True)
class CimConfig:
    tau_cls: float = 0.25
    tau_iou: float = 0.5
    tau_cas: float = 0.1
    tau_con: float = 0.85
    tau_nms: float | None = None  # None follows tau_cls
    p_seed: float = 0.1
    branches: int = 3
    nms_mode: str = "mask"
    multi_label: bool = False

    def __post_init__(self):
        if not 0 < self.p_seed <= 1:
            raise ValueError(f"p_seed must be in (0, 1], got {self.p_seed}")
        if not 0 <= self.tau_cls <= self.tau_iou <= 1:
            raise ValueError(f"need 0 <= tau_cls <= tau_iou <= 1, got {self.tau_cls}, {self.tau_iou}")
        if not 0 <= self.tau_con <= 1:
            raise ValueError(f"tau_con must be in [0, 1], got {self.tau_con}")
        if self.tau_cas < 0:
            raise ValueError(f"tau_cas must be non-negative, got {self.tau_cas}")
        if self.branches < 1:
            raise ValueError(f"branches must be >= 1, got {self.branches}")
        if self.nms_mode not in ("mask", "box"):
            raise ValueError(f"nms_mode must be 'mask' or 'box', got {self.nms_mode!r}")

    @property
    def nms_threshold(self) -> float:
        return self.tau_cls if self.tau_nms is None else self.tau_nms

    def thresholds(self, branch_k: int) -> tuple[float, float]:
        """Cascaded (classification, integrity) IoU thresholds for branch ``k >= 1``."""
        if branch_k < 1:
            raise ValueError(f"refinement branches are numbered from 1, got {branch_k}")
        step = (branch_k - 1) * self.tau_cas
        return self.tau_cls + step, self.tau_iou + step

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> CimConfig:
        data = dict(data)
        if "K" in data:
            data["branches"] = data.pop("K")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)} | {"K"}


def seed_count(p_seed: float, n: int) -> int:
    """Number of proposals kept as seed candidates: ``ceil(p_seed * n)``, at least 1."""
    # 1e-9 absorbs float noise such as 0.1 * 30 == 3.0000000000000004
    return max(1, math.ceil(p_seed * n - 1e-9))


def present_categories(image_label: Sequence[float]) -> list[int]:
    """Foreground categories with ``Y_c = 1``; index 0 (background) is skipped."""
    return [c for c in range(1, len(image_label)) if image_label[c] > 0]


@dataclass(frozen=True)
class GtEntry:
    category: int
    index: int
    seed: int


@dataclass
class PseudoGroundTruth:
    """Per-category pseudo ground truth proposals, each with the seed that mined it."""

    entries: dict[int, list[GtEntry]] = field(default_factory=dict)

    def flat(self) -> list[GtEntry]:
        return [e for c in sorted(self.entries) for e in self.entries[c]]

    def indices(self, category: int) -> list[int]:
        return [e.index for e in self.entries.get(category, [])]

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def entry_weights(self, y_prev: np.ndarray, t_prev: np.ndarray) -> list[float]:
        """Loss weight ``y * t`` each entry gives the proposals matched to it, in ``flat()`` order."""
        return [float(y_prev[e.index, e.category] * t_prev[e.index, e.category]) for e in self.flat()]

    def to_dict(self) -> dict:
        return {str(c): [[e.index, e.seed] for e in v] for c, v in sorted(self.entries.items())}

    @classmethod
    def from_dict(cls, data: Mapping) -> PseudoGroundTruth:
        return cls({int(c): [GtEntry(int(c), int(i), int(s)) for i, s in v] for c, v in data.items()})


@dataclass
class RefinedLabels:
    y_hat: np.ndarray
    t_hat: np.ndarray
    w: np.ndarray
    fg_count: int
    bg_count: int
    matched: np.ndarray  # position in gt.flat() of the best-overlapping entry, -1 if unlabeled
    thresholds: tuple[float, float] = (0.0, 0.0)

    @property
    def labeled(self) -> np.ndarray:
        return self.y_hat.any(axis=1)

    @classmethod
    def unlabeled(cls, n: int, num_categories: int, thresholds=(0.0, 0.0)) -> RefinedLabels:
        z = np.zeros((n, num_categories + 1))
        return cls(z, z.copy(), np.zeros(n), 0, 0, np.full(n, -1, dtype=np.int64), thresholds)

    def to_dict(self) -> dict:
        return {
            "y_hat": [[int(i), int(c)] for i, c in zip(*np.nonzero(self.y_hat))],
            "t_hat": [[int(i), int(c)] for i, c in zip(*np.nonzero(self.t_hat))],
            "w": [float(v) for v in self.w],
            "fg_count": self.fg_count,
            "bg_count": self.bg_count,
            "thresholds": list(self.thresholds),
        }


def _check_table(table: np.ndarray, n: int, name: str) -> None:
    if table.ndim != 2 or table.shape[0] != n:
        raise ValueError(f"{name} has shape {table.shape}, expected ({n}, C+1)")


def select_seeds(y_prev: np.ndarray, proposals: MaskSet, image_label: Sequence[float],
                 cfg: CimConfig) -> dict[int, list[int]]:
    n = len(proposals)
    y_prev = np.asarray(y_prev, dtype=float)
    _check_table(y_prev, n, "y_prev")
    if n == 0:
        return {}
    keep = seed_count(cfg.p_seed, n)
    seeds = {}
    for c in present_categories(image_label):
        # stable sort on the negated score keeps equal scores in index order
        ranked = np.argsort(-y_prev[:, c], kind="stable")[:keep]
        seeds[c] = mask_nms([int(i) for i in ranked], proposals, cfg.nms_threshold, cfg.nms_mode)
    return seeds


def mine_pseudo_gt(seeds: Mapping[int, Sequence[int]], t_prev: np.ndarray, proposals: MaskSet,
                   cfg: CimConfig) -> PseudoGroundTruth:
    t_prev = np.asarray(t_prev, dtype=float)
    _check_table(t_prev, len(proposals), "t_prev")
    gt = PseudoGroundTruth()
    for c in sorted(seeds):
        cat_seeds = list(seeds[c])
        if not cat_seeds:
            continue
        contains = containment_matrix(proposals, cat_seeds) > cfg.tau_con
        chosen: list[GtEntry] = []
        seen: set[int] = set()
        for j, seed in enumerate(cat_seeds):
            rows = np.flatnonzero(contains[:, j])
            if rows.size == 0:
                # only an empty seed mask fails to contain itself
                continue
            best = int(rows[np.argmax(t_prev[rows, c])])
            if best not in seen:
                seen.add(best)
                chosen.append(GtEntry(c, best, seed))
        if chosen:
            gt.entries[c] = chosen
    return gt


def assign_refined_labels(gt: PseudoGroundTruth, proposals: MaskSet, y_prev: np.ndarray,
                          t_prev: np.ndarray, branch_k: int, cfg: CimConfig) -> RefinedLabels:
    n = len(proposals)
    y_prev = np.asarray(y_prev, dtype=float)
    t_prev = np.asarray(t_prev, dtype=float)
    _check_table(y_prev, n, "y_prev")
    _check_table(t_prev, n, "t_prev")
    num_categories = y_prev.shape[1] - 1
    tau_cls, tau_iou = cfg.thresholds(branch_k)
    entries = gt.flat()
    if not entries or n == 0:
        return RefinedLabels.unlabeled(n, num_categories, (tau_cls, tau_iou))

    overlaps = cross_iou(proposals.masks, [proposals[e.index] for e in entries])
    best = np.argmax(overlaps, axis=1)
    best_iou = overlaps[np.arange(n), best]
    cats = np.array([e.category for e in entries])

    y_hat = np.zeros((n, num_categories + 1))
    t_hat = np.zeros_like(y_hat)
    w = np.zeros(n)
    matched = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        if best_iou[i] <= 0:
            continue
        j = int(best[i])
        if cfg.multi_label:
            for c in np.unique(cats):
                top = overlaps[i, cats == c].max()
                if top > tau_cls:
                    y_hat[i, c] = 1.0
                if top > tau_iou:
                    t_hat[i, c] = 1.0
        else:
            c = int(cats[j])
            if best_iou[i] > tau_cls:
                y_hat[i, c] = 1.0
            if best_iou[i] > tau_iou:
                t_hat[i, c] = 1.0
        if not y_hat[i, 1:].any():
            y_hat[i, 0] = 1.0
        e = entries[j]
        w[i] = y_prev[e.index, e.category] * t_prev[e.index, e.category]
        matched[i] = j

    fg = int(y_hat[:, 1:].any(axis=1).sum())
    bg = int((y_hat[:, 0] > 0).sum())
    return RefinedLabels(y_hat, t_hat, w, fg, bg, matched, (tau_cls, tau_iou))


@dataclass
class CimBranchResult:
    seeds: dict[int, list[int]]
    pseudo_gt: PseudoGroundTruth
    labels: RefinedLabels
    sampled_gt: PseudoGroundTruth | None = None


def run_cim_branch(y_prev: np.ndarray, t_prev: np.ndarray, proposals: MaskSet,
                   image_label: Sequence[float], branch_k: int, cfg: CimConfig,
                   resample: Callable[[PseudoGroundTruth], PseudoGroundTruth] | None = None,
                   ) -> CimBranchResult:
    """Seeds, pseudo ground truth and refined labels for refinement branch ``branch_k``.

    ``resample`` may replace the mined pseudo ground truth before labels are
    assigned (anti-noise sampling); the mined set is still reported.
    """
    seeds = select_seeds(y_prev, proposals, image_label, cfg)
    gt = mine_pseudo_gt(seeds, t_prev, proposals, cfg)
    sampled = resample(gt) if resample is not None and len(gt) else None
    labels = assign_refined_labels(sampled if sampled is not None else gt,
                                   proposals, y_prev, t_prev, branch_k, cfg)
    return CimBranchResult(seeds, gt, labels, sampled)
