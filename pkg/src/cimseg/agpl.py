"""Pre-computed pseudo labels from peak cues (attention-guided pseudo labeling).

Each peak gathers the proposals covering it; their thresholded mean is a
support mask.  Supports are swept in descending peak score and hand their
category to proposals overlapping them by IoU > 0.5.  Anything left over that
still touches a support becomes background, and the rest stays unlabeled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .masks import BinaryMask, MaskSet, intersection_area, iou, mean_threshold

SUPPORT_THRESHOLD = 0.7
ASSIGN_IOU = 0.5


@dataclass(frozen=True)
class PeakCue:
    category: int
    score: float
    pixel: tuple[int, int]

    def __post_init__(self):
        if self.category < 1:
            raise ValueError(f"peak category must be a foreground index, got {self.category}")
        if self.score < 0:
            raise ValueError(f"peak score must be non-negative, got {self.score}")

    def to_dict(self) -> dict:
        return {"cat": self.category, "score": self.score, "px": list(self.pixel)}

    @classmethod
    def from_dict(cls, data: dict) -> PeakCue:
        row, col = data["px"]
        return cls(int(data["cat"]), float(data["score"]), (int(row), int(col)))


@dataclass(frozen=True)
class SupportMask:
    mask: BinaryMask
    category: int
    peak_score: float
    supporter_count: int
    peak_index: int = -1


@dataclass
class PrecomputedLabels:
    """One-hot-or-zero label rows plus, per proposal, the support that labeled it.

    ``assigned_support[i]`` is the index of the support mask for a foreground
    proposal and ``None`` otherwise.
    """

    y_hat0: np.ndarray
    assigned_support: list[int | None]

    @property
    def num_categories(self) -> int:
        return self.y_hat0.shape[1] - 1

    @property
    def foreground(self) -> np.ndarray:
        return self.y_hat0[:, 1:].any(axis=1)

    @property
    def background(self) -> np.ndarray:
        return self.y_hat0[:, 0] > 0

    def category_of(self, i: int) -> int | None:
        nz = np.flatnonzero(self.y_hat0[i])
        return int(nz[0]) if nz.size else None


@dataclass(frozen=True)
class ProposalCluster:
    members: tuple[int, ...]
    category: int

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass
class ProposalClusterSet:
    clusters: list[ProposalCluster] = field(default_factory=list)
    num_categories: int = 0

    def __len__(self) -> int:
        return len(self.clusters)

    def __iter__(self):
        return iter(self.clusters)

    def labels(self) -> np.ndarray:
        """Cluster labels as one-hot rows over C+1 categories."""
        out = np.zeros((len(self.clusters), self.num_categories + 1))
        for n, cl in enumerate(self.clusters):
            out[n, cl.category] = 1.0
        return out


def compute_support_masks(proposals: MaskSet, peaks: list[PeakCue]) -> list[SupportMask]:
    supports = []
    for p_idx, peak in enumerate(peaks):
        row, col = peak.pixel
        if not (0 <= row < proposals.height and 0 <= col < proposals.width):
            raise ValueError(f"peak {p_idx} at {peak.pixel} lies outside the canvas")
        covering = [m for m in proposals if m.contains_pixel(row, col)]
        if not covering:
            continue
        supports.append(SupportMask(
            mask=mean_threshold(covering, SUPPORT_THRESHOLD),
            category=peak.category,
            peak_score=peak.score,
            supporter_count=len(covering),
            peak_index=p_idx,
        ))
    return supports


def assign_precomputed_labels(proposals: MaskSet, supports: list[SupportMask],
                              num_categories: int) -> PrecomputedLabels:
    n = len(proposals)
    y = np.zeros((n, num_categories + 1))
    assigned: list[int | None] = [None] * n
    order = sorted(range(len(supports)), key=lambda s: (-supports[s].peak_score, s))
    for s in order:
        sup = supports[s]
        if not 1 <= sup.category <= num_categories:
            raise ValueError(f"support {s} has category {sup.category} outside 1..{num_categories}")
        for i, mask in enumerate(proposals):
            if assigned[i] is None and iou(mask, sup.mask) > ASSIGN_IOU:
                assigned[i] = s
                y[i, sup.category] = 1.0
    for i, mask in enumerate(proposals):
        if assigned[i] is None and any(intersection_area(mask, sup.mask) > 0 for sup in supports):
            y[i, 0] = 1.0
    return PrecomputedLabels(y, assigned)


def build_clusters(labels: PrecomputedLabels) -> ProposalClusterSet:
    """Group foreground proposals by their support; every background proposal is its own cluster.

    Foreground clusters come first, ordered by support index, then background
    singletons in proposal order.
    """
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(labels.assigned_support):
        if s is not None:
            groups.setdefault(s, []).append(i)
    clusters = []
    for s in sorted(groups):
        members = groups[s]
        clusters.append(ProposalCluster(tuple(members), labels.category_of(members[0])))
    for i in np.flatnonzero(labels.background):
        clusters.append(ProposalCluster((int(i),), 0))
    return ProposalClusterSet(clusters, labels.num_categories)
