"""Run-length-encoded binary masks and the pairwise geometry kernels.

Masks are stored as canonical row-major run lists: sorted ``(start, length)``
pairs with no empty, overlapping or touching runs.  Canonical form makes mask
equality a plain run-list comparison, and every kernel here works on the runs
directly with exact integer arithmetic.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

Run = tuple[int, int]


class CanvasMismatchError(ValueError):
    """Raised when two masks that must share a canvas do not."""


@dataclass(frozen=True)
class BinaryMask:
    height: int
    width: int
    runs: tuple[Run, ...] = ()

    def __post_init__(self):
        if self.height < 0 or self.width < 0:
            raise ValueError(f"negative canvas {self.height}x{self.width}")
        size = self.height * self.width
        prev_end = -1
        for start, length in self.runs:
            if length <= 0:
                raise ValueError(f"run ({start}, {length}) has non-positive length")
            if start < 0 or start + length > size:
                raise ValueError(f"run ({start}, {length}) outside canvas of {size} pixels")
            if start <= prev_end:
                # equality means the runs touch and should have been merged
                raise ValueError(f"runs not canonical at start {start}")
            prev_end = start + length

    # -- constructors -----------------------------------------------------

    @classmethod
    def empty(cls, height: int, width: int) -> BinaryMask:
        return cls(height, width, ())

    @classmethod
    def full(cls, height: int, width: int) -> BinaryMask:
        size = height * width
        return cls(height, width, ((0, size),) if size else ())

    @classmethod
    def from_runs(cls, height: int, width: int, runs: Iterable[Sequence[int]]) -> BinaryMask:
        """Build a mask from arbitrary runs, sorting and merging them into canonical form."""
        merged: list[list[int]] = []
        for start, length in sorted((int(s), int(n)) for s, n in runs):
            if length <= 0:
                continue
            end = start + length
            if merged and start <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], end)
            else:
                merged.append([start, end])
        return cls(height, width, tuple((s, e - s) for s, e in merged))

    @classmethod
    def from_dense(cls, grid) -> BinaryMask:
        arr = np.asarray(grid, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D grid, got shape {arr.shape}")
        h, w = arr.shape
        flat = np.concatenate(([False], arr.ravel(), [False])).astype(np.int8)
        edges = np.flatnonzero(np.diff(flat))
        starts, ends = edges[0::2], edges[1::2]
        return cls(h, w, tuple((int(s), int(e - s)) for s, e in zip(starts, ends)))

    @classmethod
    def from_box(cls, height: int, width: int, top: int, left: int, bottom: int, right: int) -> BinaryMask:
        """Rectangle covering rows ``[top, bottom)`` and columns ``[left, right)``, clipped to the canvas."""
        top, left, bottom, right = int(top), int(left), int(bottom), int(right)
        top, bottom = max(top, 0), min(bottom, height)
        left, right = max(left, 0), min(right, width)
        if top >= bottom or left >= right:
            return cls.empty(height, width)
        if left == 0 and right == width:
            return cls(height, width, ((top * width, (bottom - top) * width),))
        return cls(height, width, tuple((r * width + left, right - left) for r in range(top, bottom)))

    # -- views ------------------------------------------------------------

    @property
    def canvas(self) -> tuple[int, int]:
        return (self.height, self.width)

    @cached_property
    def area(self) -> int:
        return sum(length for _, length in self.runs)

    @cached_property
    def _starts(self) -> list[int]:
        return [s for s, _ in self.runs]

    def to_dense(self) -> np.ndarray:
        flat = np.zeros(self.height * self.width, dtype=bool)
        for start, length in self.runs:
            flat[start:start + length] = True
        return flat.reshape(self.height, self.width)

    def contains_pixel(self, row: int, col: int) -> bool:
        if not (0 <= row < self.height and 0 <= col < self.width):
            return False
        idx = row * self.width + col
        pos = bisect.bisect_right(self._starts, idx) - 1
        if pos < 0:
            return False
        start, length = self.runs[pos]
        return idx < start + length

    def bbox(self) -> tuple[int, int, int, int] | None:
        """Half-open bounding box ``(top, left, bottom, right)``; ``None`` for an empty mask."""
        if not self.runs:
            return None
        w = self.width
        top = self.runs[0][0] // w
        bottom = (self.runs[-1][0] + self.runs[-1][1] - 1) // w + 1
        left, right = w, 0
        for start, length in self.runs:
            end = start + length - 1
            if start // w != end // w:
                left, right = 0, w
                break
            left = min(left, start % w)
            right = max(right, end % w + 1)
        return (top, left, bottom, right)

    def union(self, other: BinaryMask) -> BinaryMask:
        _check_canvas(self, other)
        return BinaryMask.from_runs(self.height, self.width, self.runs + other.runs)

    def intersect(self, other: BinaryMask) -> BinaryMask:
        _check_canvas(self, other)
        out = []
        i = j = 0
        ra, rb = self.runs, other.runs
        while i < len(ra) and j < len(rb):
            s1, e1 = ra[i][0], ra[i][0] + ra[i][1]
            s2, e2 = rb[j][0], rb[j][0] + rb[j][1]
            lo, hi = max(s1, s2), min(e1, e2)
            if hi > lo:
                out.append((lo, hi - lo))
            if e1 < e2:
                i += 1
            else:
                j += 1
        return BinaryMask(self.height, self.width, tuple(out))

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {"h": self.height, "w": self.width, "runs": [[s, n] for s, n in self.runs]}

    @classmethod
    def from_dict(cls, data: dict) -> BinaryMask:
        try:
            h, w, runs = int(data["h"]), int(data["w"]), data["runs"]
            pairs = tuple((int(s), int(n)) for s, n in runs)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed RLE mask: {exc!r}") from None
        return cls(h, w, pairs)


@dataclass(frozen=True)
class MaskSet:
    """An ordered collection of masks on one canvas; positions are proposal ids."""

    height: int
    width: int
    masks: tuple[BinaryMask, ...] = field(default_factory=tuple)

    def __post_init__(self):
        for i, m in enumerate(self.masks):
            if m.canvas != (self.height, self.width):
                raise CanvasMismatchError(
                    f"mask {i} is {m.height}x{m.width}, set canvas is {self.height}x{self.width}")

    @classmethod
    def of(cls, masks: Sequence[BinaryMask], canvas: tuple[int, int] | None = None) -> MaskSet:
        if canvas is None:
            if not masks:
                raise ValueError("canvas required for an empty mask set")
            canvas = masks[0].canvas
        return cls(canvas[0], canvas[1], tuple(masks))

    @property
    def canvas(self) -> tuple[int, int]:
        return (self.height, self.width)

    def __len__(self) -> int:
        return len(self.masks)

    def __getitem__(self, idx: int) -> BinaryMask:
        return self.masks[idx]

    def __iter__(self):
        return iter(self.masks)

    def subset(self, indices: Iterable[int]) -> MaskSet:
        return MaskSet(self.height, self.width, tuple(self.masks[i] for i in indices))


def _check_canvas(a: BinaryMask, b: BinaryMask) -> None:
    if a.canvas != b.canvas:
        raise CanvasMismatchError(f"canvas {a.canvas} vs {b.canvas}")


def _overlap(ra: tuple[Run, ...], rb: tuple[Run, ...]) -> int:
    total = 0
    i = j = 0
    na, nb = len(ra), len(rb)
    while i < na and j < nb:
        s1, l1 = ra[i]
        s2, l2 = rb[j]
        e1, e2 = s1 + l1, s2 + l2
        lo = s1 if s1 > s2 else s2
        hi = e1 if e1 < e2 else e2
        if hi > lo:
            total += hi - lo
        if e1 < e2:
            i += 1
        else:
            j += 1
    return total


def area(mask: BinaryMask) -> int:
    return mask.area


def intersection_area(a: BinaryMask, b: BinaryMask) -> int:
    """Number of pixels set in both masks, by run-list merge."""
    _check_canvas(a, b)
    return _overlap(a.runs, b.runs)


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Mask intersection-over-union. Two empty masks have IoU 0."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def box_iou(a: BinaryMask, b: BinaryMask) -> float:
    """IoU of the masks' pixel bounding boxes (0 if either mask is empty)."""
    _check_canvas(a, b)
    ba, bb = a.bbox(), b.bbox()
    if ba is None or bb is None:
        return 0.0
    ih = min(ba[2], bb[2]) - max(ba[0], bb[0])
    iw = min(ba[3], bb[3]) - max(ba[1], bb[1])
    inter = max(ih, 0) * max(iw, 0)
    area_a = (ba[2] - ba[0]) * (ba[3] - ba[1])
    area_b = (bb[2] - bb[0]) * (bb[3] - bb[1])
    return inter / (area_a + area_b - inter)


def intersection_matrix(rows: Sequence[BinaryMask], cols: Sequence[BinaryMask]) -> np.ndarray:
    out = np.zeros((len(rows), len(cols)), dtype=np.int64)
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            _check_canvas(a, b)
            out[i, j] = _overlap(a.runs, b.runs)
    return out


def iou_matrix(masks: MaskSet) -> np.ndarray:
    """Symmetric N x N IoU matrix over a mask set."""
    n = len(masks)
    areas = np.array([m.area for m in masks], dtype=np.int64)
    inter = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        ri = masks[i].runs
        inter[i, i] = areas[i]
        for j in range(i + 1, n):
            inter[i, j] = inter[j, i] = _overlap(ri, masks[j].runs)
    union = areas[:, None] + areas[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def cross_iou(rows: Sequence[BinaryMask], cols: Sequence[BinaryMask]) -> np.ndarray:
    """IoU between every row mask and every column mask."""
    inter = intersection_matrix(rows, cols)
    ra = np.array([m.area for m in rows], dtype=np.int64)
    ca = np.array([m.area for m in cols], dtype=np.int64)
    union = ra[:, None] + ca[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def containment_matrix(masks: MaskSet, columns: Sequence[int] | None = None) -> np.ndarray:
    """Entry (i, j) is the fraction of column mask ``columns[j]`` covered by mask i.

    Columns whose mask is empty are all zero.
    """
    n = len(masks)
    if columns is None:
        columns = range(n)
    columns = list(columns)
    for c in columns:
        if not 0 <= c < n:
            raise IndexError(f"column index {c} out of range for {n} masks")
    inter = intersection_matrix(masks.masks, [masks[c] for c in columns])
    col_area = np.array([masks[c].area for c in columns], dtype=np.int64)
    safe = np.where(col_area > 0, col_area, 1)
    return np.where(col_area[None, :] > 0, inter / safe[None, :], 0.0)


def mask_nms(candidates: Sequence[int], masks: MaskSet, threshold: float,
             mode: str = "mask") -> list[int]:
    """Greedy suppression over ``candidates``, which must already be in priority order.

    A candidate is dropped when its IoU with any kept mask exceeds ``threshold``.
    ``mode="box"`` compares bounding boxes instead of masks.
    """
    overlap = {"mask": iou, "box": box_iou}.get(mode)
    if overlap is None:
        raise ValueError(f"unknown NMS mode {mode!r}")
    kept: list[int] = []
    for idx in candidates:
        m = masks[idx]
        if all(overlap(m, masks[k]) <= threshold for k in kept):
            kept.append(idx)
    return kept


def mean_threshold(masks: Sequence[BinaryMask], threshold: float) -> BinaryMask:
    """Pixels covered by strictly more than ``threshold`` of the given masks."""
    masks = list(masks)
    if not masks:
        raise ValueError("mean_threshold needs at least one mask")
    h, w = masks[0].canvas
    for m in masks[1:]:
        _check_canvas(masks[0], m)
    n = len(masks)
    delta: dict[int, int] = {}
    for m in masks:
        for start, length in m.runs:
            delta[start] = delta.get(start, 0) + 1
            delta[start + length] = delta.get(start + length, 0) - 1
    runs = []
    count = 0
    points = sorted(delta)
    for pos, nxt in zip(points, points[1:]):
        count += delta[pos]
        if count and count / n > threshold:
            runs.append((pos, nxt - pos))
    return BinaryMask.from_runs(h, w, runs)

