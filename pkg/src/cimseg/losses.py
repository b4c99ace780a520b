"""Evaluation of the training objectives and anti-noise sampling.

These are plain numeric evaluations (no gradients): the surrogate loop and
the tests use them to report how well a branch's scores fit its labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agpl import ProposalClusterSet
from .cim import GtEntry, PseudoGroundTruth, RefinedLabels

EPS = 1e-12
ALPHA = 12.0


def smooth_l1(x, beta: float = 1.0):
    ax = np.abs(x)
    out = np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)
    return float(out) if np.ndim(out) == 0 else out


def _clamp(p, eps: float = EPS):
    return np.clip(p, eps, 1.0 - eps)


@dataclass(frozen=True)
class RefinementTerms:
    classification: float
    integrity: float

    @property
    def total(self) -> float:
        return self.classification + self.integrity


def refinement_loss(y_k: np.ndarray, t_k: np.ndarray, labels: RefinedLabels,
                    eps: float = EPS) -> RefinementTerms:
    """Weighted cross-entropy over labeled rows plus weighted smooth-L1 on integrity.

    The cross-entropy is normalized by N_fg + N_bg and the integrity term by
    N_fg; the integrity term is 0 when there is no foreground proposal.
    """
    y_k = np.asarray(y_k, dtype=float)
    t_k = np.asarray(t_k, dtype=float)
    if y_k.shape != labels.y_hat.shape or t_k.shape != labels.y_hat.shape:
        raise ValueError(f"score tables {y_k.shape}/{t_k.shape} do not match labels {labels.y_hat.shape}")
    n_fg, n_bg = labels.fg_count, labels.bg_count
    if n_fg + n_bg == 0:
        return RefinementTerms(0.0, 0.0)
    w = labels.w[:, None]
    ce = -float(np.sum(w * labels.y_hat * np.log(_clamp(y_k, eps)))) / (n_fg + n_bg)
    integrity = 0.0
    if n_fg:
        fg = labels.y_hat[:, 1:]
        resid = smooth_l1(labels.t_hat[:, 1:] - t_k[:, 1:])
        integrity = float(np.sum(w * fg * resid)) / n_fg
    return RefinementTerms(ce, integrity)


def image_score(y0: np.ndarray, t0: np.ndarray, mode: str = "clamp") -> np.ndarray:
    """Image-level score: per-category sum over proposals of ``y0 * t0``.

    ``mode="clamp"`` clips the sum into [0, 1]; ``mode="softmax"`` first
    normalizes ``t0`` with a softmax over proposals, which keeps the sum in
    [0, 1] without clipping.
    """
    y0 = np.asarray(y0, dtype=float)
    t0 = np.asarray(t0, dtype=float)
    if y0.shape != t0.shape:
        raise ValueError(f"tables differ in shape: {y0.shape} vs {t0.shape}")
    if mode == "clamp":
        return np.clip((y0 * t0).sum(axis=0), 0.0, 1.0)
    if mode == "softmax":
        z = np.exp(t0 - t0.max(axis=0, keepdims=True))
        return (y0 * z / z.sum(axis=0, keepdims=True)).sum(axis=0)
    raise ValueError(f"unknown image score mode {mode!r}")


@dataclass(frozen=True)
class AntiNoiseTerms:
    bce: float
    pcl: float

    @property
    def total(self) -> float:
        return self.bce + self.pcl


def anti_noise_loss(y0: np.ndarray, t0: np.ndarray, image_label: Sequence[float],
                    clusters: ProposalClusterSet, alpha: float = ALPHA, eps: float = EPS,
                    mode: str = "clamp") -> AntiNoiseTerms:
    """Image-level BCE plus the alpha-weighted proposal-cluster term."""
    y0 = np.asarray(y0, dtype=float)
    label = np.asarray(image_label, dtype=float)
    if label.shape != (y0.shape[1],):
        raise ValueError(f"image label of length {label.size} does not match {y0.shape[1]} columns")
    if label[0] != 1:
        raise ValueError("image label must mark background present (Y_0 = 1)")
    y_img = _clamp(image_score(y0, t0, mode), eps)
    bce = -float(np.mean(label * np.log(y_img) + (1 - label) * np.log(1 - y_img)))

    n = y0.shape[0]
    total_members = sum(cl.size for cl in clusters)
    pcl = 0.0
    if total_members:
        acc = 0.0
        for cl in clusters:
            members = np.asarray(cl.members, dtype=np.int64)
            if members.size and (members.min() < 0 or members.max() >= n):
                raise IndexError(f"cluster member out of range for {n} proposals")
            mean = y0[members, cl.category].sum() / cl.size
            acc += cl.size * np.log(max(mean, eps))
        pcl = -alpha * float(acc) / total_members
    return AntiNoiseTerms(bce, pcl)


@dataclass
class LossReport:
    l_ref: list[float]
    l_anti: float
    l_total: float
    components: dict = field(default_factory=dict)

    @classmethod
    def build(cls, refinement: Sequence[RefinementTerms], anti: AntiNoiseTerms) -> LossReport:
        l_ref = [r.total for r in refinement]
        l_anti = anti.total
        return cls(
            l_ref=l_ref,
            l_anti=l_anti,
            l_total=l_anti + sum(l_ref),
            components={
                "classification": [r.classification for r in refinement],
                "integrity": [r.integrity for r in refinement],
                "bce": anti.bce,
                "pcl": anti.pcl,
            },
        )

    def to_dict(self) -> dict:
        return {"l_ref": self.l_ref, "l_anti": self.l_anti, "l_total": self.l_total,
                "components": self.components}


@dataclass
class SamplerState:
    """Seeded source of anti-noise draws. Not safe to share across threads."""

    rng_seed: int
    draw_count: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.rng_seed)

    def draw(self, weights: Sequence[float], size: int) -> np.ndarray:
        """``size`` indices drawn with replacement, proportional to ``weights``.

        All-zero weights fall back to a uniform draw.
        """
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("need a non-empty weight vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        total = w.sum()
        p = w / total if total > 0 else np.full(w.size, 1.0 / w.size)
        out = self._rng.choice(w.size, size=size, replace=True, p=p)
        self.draw_count += size
        return out


def anti_noise_sample(gt: PseudoGroundTruth, weights: Sequence[float], state: SamplerState,
                      count: int | None = None) -> PseudoGroundTruth:
    """Resample each category's pseudo ground truth with replacement.

    ``weights`` align with ``gt.flat()``; by default a category draws as many
    entries as it had.  The result is a multiset in draw order.
    """
    flat = gt.flat()
    if len(weights) != len(flat):
        raise ValueError(f"{len(weights)} weights for {len(flat)} pseudo ground truth entries")
    out = PseudoGroundTruth()
    pos = 0
    for c in sorted(gt.entries):
        entries = gt.entries[c]
        w = weights[pos:pos + len(entries)]
        pos += len(entries)
        picks = state.draw(w, count if count is not None else len(entries))
        out.entries[c] = [GtEntry(c, entries[k].index, entries[k].seed) for k in picks]
    return out
