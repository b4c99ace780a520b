"""Desk-scale synthetic scenes and a surrogate scorer for the refinement loop.

Scenes hold a few axis-aligned instances (rectangles, sometimes an L of two
rectangles).  Proposals reproduce redundant segmentation: each instance gets
near-complete copies, small fragments that sit inside it, and enlarged or
shifted variants, plus background boxes that touch no instance.

The surrogate scorer stands in for the network heads.  Its classification
scores favour fragments and its integrity scores are a noisy IoU with the
true instance, so the mining step has the same problem to solve as on real
data.  Supervision nudges the scores toward the labels with step ``eta``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np

from .agpl import (PeakCue, PrecomputedLabels, ProposalClusterSet, SupportMask,
                   assign_precomputed_labels, build_clusters, compute_support_masks)
from .cim import CimConfig, PseudoGroundTruth, RefinedLabels, run_cim_branch
from .losses import (ALPHA, LossReport, RefinementTerms, SamplerState, anti_noise_loss,
                     anti_noise_sample, refinement_loss)
from .masks import BinaryMask, MaskSet, cross_iou, iou
from .seeding import derive_seed

log = logging.getLogger(__name__)

Box = tuple[int, int, int, int]  # top, left, bottom, right (half-open)


class SceneGenerationError(ValueError):
    pass


def _from_mapping(cls, data: Mapping):
    known = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    num_instances: int = 3
    num_categories: int = 2
    min_size: int = 12
    max_size: int = 20
    l_shape_prob: float = 0.3
    margin: int = 3
    placement_tries: int = 500

    def __post_init__(self):
        if self.num_instances < 1:
            raise ValueError(f"num_instances must be >= 1, got {self.num_instances}")
        if self.num_categories < 1:
            raise ValueError(f"num_categories must be >= 1, got {self.num_categories}")
        if not 4 <= self.min_size <= self.max_size:
            raise ValueError(f"need 4 <= min_size <= max_size, got {self.min_size}, {self.max_size}")
        if self.max_size > min(self.height, self.width):
            raise ValueError("max_size exceeds the canvas")

    from_dict = classmethod(_from_mapping)


@dataclass(frozen=True)
class ProposalRecipe:
    n_full: int = 2
    n_fragments: int = 3
    n_enlarged: int = 2
    n_background: int = 10
    jitter: int = 1
    enlarge_min: int = 2
    enlarge_max: int = 5
    fragment_min: float = 0.15
    fragment_max: float = 0.45
    proposal_tries: int = 50

    def __post_init__(self):
        if min(self.n_full, self.n_fragments, self.n_enlarged, self.n_background) < 0:
            raise ValueError("proposal counts must be non-negative")
        if self.n_full < 1:
            raise ValueError("each instance needs at least one near-complete proposal")
        if not 0 < self.fragment_min <= self.fragment_max < 0.5:
            raise ValueError("fragment area fractions must satisfy 0 < min <= max < 0.5")

    from_dict = classmethod(_from_mapping)


@dataclass(frozen=True)
class Instance:
    mask: BinaryMask
    category: int
    boxes: tuple[Box, ...]


@dataclass
class Scene:
    height: int
    width: int
    num_categories: int
    instances: list[Instance]

    def __post_init__(self):
        for g, inst in enumerate(self.instances):
            if inst.mask.area == 0:
                raise ValueError(f"instance {g} is empty")
            if not 1 <= inst.category <= self.num_categories:
                raise ValueError(f"instance {g} has category {inst.category} outside 1..{self.num_categories}")

    @property
    def canvas(self) -> tuple[int, int]:
        return (self.height, self.width)

    def ground_truth(self) -> list[tuple[BinaryMask, int]]:
        return [(inst.mask, inst.category) for inst in self.instances]

    @property
    def image_label(self) -> np.ndarray:
        y = np.zeros(self.num_categories + 1, dtype=np.int64)
        y[0] = 1
        for inst in self.instances:
            y[inst.category] = 1
        return y

    def to_dict(self) -> dict:
        return {
            "h": self.height,
            "w": self.width,
            "num_categories": self.num_categories,
            "image_label": self.image_label.tolist(),
            "instances": [{"cat": inst.category, "mask": inst.mask.to_dict(),
                           "boxes": [list(b) for b in inst.boxes]} for inst in self.instances],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> Scene:
        instances = [Instance(BinaryMask.from_dict(d["mask"]), int(d["cat"]),
                              tuple(tuple(int(v) for v in b) for b in d.get("boxes", [])))
                     for d in data["instances"]]
        return cls(int(data["h"]), int(data["w"]), int(data["num_categories"]), instances)


@dataclass(frozen=True)
class ProposalInfo:
    instance: int  # -1 for background proposals
    kind: str


def _boxes_mask(h: int, w: int, boxes) -> BinaryMask:
    out = BinaryMask.empty(h, w)
    for b in boxes:
        out = out.union(BinaryMask.from_box(h, w, *b))
    return out


def _overlaps(box: Box, other: Box, pad: int) -> bool:
    return not (box[2] + pad <= other[0] or other[2] + pad <= box[0]
                or box[3] + pad <= other[1] or other[3] + pad <= box[1])


def _random_shape(cfg: SceneConfig, rng: np.random.Generator) -> tuple[Box, ...]:
    bh, bw = rng.integers(cfg.min_size, cfg.max_size + 1, size=2)
    top = int(rng.integers(0, cfg.height - bh + 1))
    left = int(rng.integers(0, cfg.width - bw + 1))
    main = (top, left, top + int(bh), left + int(bw))
    if rng.random() >= cfg.l_shape_prob:
        return (main,)
    # an arm hanging off the bottom of the main box, flush with its left or right side
    ah = int(rng.integers(cfg.min_size // 2, cfg.min_size + 1))
    aw = int(rng.integers(max(3, int(bw) // 3), max(4, int(bw) // 2) + 1))
    arm_left = main[1] if rng.random() < 0.5 else main[3] - aw
    arm = (main[2], arm_left, main[2] + ah, arm_left + aw)
    if arm[2] > cfg.height:
        return (main,)
    return (main, arm)


def _bbox_of(boxes) -> Box:
    return (min(b[0] for b in boxes), min(b[1] for b in boxes),
            max(b[2] for b in boxes), max(b[3] for b in boxes))


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    """Place ``cfg.num_instances`` disjoint instances, at least ``margin`` pixels apart."""
    placed: list[tuple[Box, ...]] = []
    tries = 0
    while len(placed) < cfg.num_instances:
        tries += 1
        if tries > cfg.placement_tries:
            raise SceneGenerationError(
                f"placed {len(placed)} of {cfg.num_instances} instances within {cfg.placement_tries} tries")
        shape = _random_shape(cfg, rng)
        box = _bbox_of(shape)
        if any(_overlaps(box, _bbox_of(other), cfg.margin) for other in placed):
            continue
        placed.append(shape)
    cats = rng.integers(1, cfg.num_categories + 1, size=len(placed))
    instances = [Instance(_boxes_mask(cfg.height, cfg.width, shape), int(c), shape)
                 for shape, c in zip(placed, cats)]
    return Scene(cfg.height, cfg.width, cfg.num_categories, instances)


def _jittered_copy(scene: Scene, inst: Instance, jitter: int, rng) -> BinaryMask:
    h, w = scene.canvas
    boxes = []
    for b in inst.boxes:
        d = rng.integers(-jitter, jitter + 1, size=4)
        boxes.append((b[0] + d[0], b[1] + d[1], b[2] + d[2], b[3] + d[3]))
    return _boxes_mask(h, w, boxes)


def _fragment(scene: Scene, inst: Instance, recipe: ProposalRecipe, rng) -> BinaryMask | None:
    h, w = scene.canvas
    main = inst.boxes[0]
    mh, mw = main[2] - main[0], main[3] - main[1]
    for _ in range(recipe.proposal_tries):
        fh = int(rng.integers(3, mh + 1))
        fw = int(rng.integers(3, mw + 1))
        frac = fh * fw / inst.mask.area
        if not recipe.fragment_min <= frac <= recipe.fragment_max:
            continue
        top = main[0] + int(rng.integers(0, mh - fh + 1))
        left = main[1] + int(rng.integers(0, mw - fw + 1))
        return BinaryMask.from_box(h, w, top, left, top + fh, left + fw)
    return None


def _variant(scene: Scene, inst: Instance, kind: str, recipe: ProposalRecipe, rng) -> BinaryMask:
    h, w = scene.canvas
    if kind == "enlarged":
        t, l, b, r = _bbox_of(inst.boxes)
        d = rng.integers(recipe.enlarge_min, recipe.enlarge_max + 1, size=4)
        return BinaryMask.from_box(h, w, t - d[0], l - d[1], b + d[2], r + d[3])
    dy, dx = rng.integers(recipe.enlarge_min, recipe.enlarge_max + 1, size=2) * rng.choice([-1, 1], size=2)
    return _boxes_mask(h, w, [(b[0] + dy, b[1] + dx, b[2] + dy, b[3] + dx) for b in inst.boxes])


def _background_box(scene: Scene, occupied: BinaryMask, recipe: ProposalRecipe, rng) -> BinaryMask | None:
    h, w = scene.canvas
    for _ in range(recipe.proposal_tries):
        bh, bw = rng.integers(4, 13, size=2)
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        box = BinaryMask.from_box(h, w, top, left, top + int(bh), left + int(bw))
        if box.area and not box.intersect(occupied).runs:
            return box
    return None


def generate_proposals(scene: Scene, recipe: ProposalRecipe,
                       rng: np.random.Generator) -> tuple[MaskSet, list[ProposalInfo]]:
    """Redundant proposals for every instance plus background boxes, in shuffled order."""
    h, w = scene.canvas
    masks: list[BinaryMask] = []
    info: list[ProposalInfo] = []
    for g, inst in enumerate(scene.instances):
        for k in range(recipe.n_full):
            copy = inst.mask
            if recipe.jitter and k > 0:
                for _ in range(recipe.proposal_tries):
                    cand = _jittered_copy(scene, inst, recipe.jitter, rng)
                    if iou(cand, inst.mask) > 0.8:
                        copy = cand
                        break
            masks.append(copy)
            info.append(ProposalInfo(g, "full"))
        for _ in range(recipe.n_fragments):
            frag = _fragment(scene, inst, recipe, rng)
            if frag is None:
                log.warning("could not cut a fragment for instance %d", g)
                continue
            masks.append(frag)
            info.append(ProposalInfo(g, "fragment"))
        for k in range(recipe.n_enlarged):
            kind = "enlarged" if k % 2 == 0 else "shifted"
            var = _variant(scene, inst, kind, recipe, rng)
            if var.area == 0:
                log.warning("dropping empty %s variant of instance %d", kind, g)
                continue
            masks.append(var)
            info.append(ProposalInfo(g, kind))
    occupied = BinaryMask.empty(h, w)
    for inst in scene.instances:
        occupied = occupied.union(inst.mask)
    for _ in range(recipe.n_background):
        box = _background_box(scene, occupied, recipe, rng)
        if box is None:
            log.warning("no free space for a background proposal")
            continue
        masks.append(box)
        info.append(ProposalInfo(-1, "background"))

    order = rng.permutation(len(masks))
    proposals = MaskSet(h, w, tuple(masks[i] for i in order))
    info = [info[i] for i in order]
    check_proposals(scene, proposals, info, recipe)
    return proposals, info


def check_proposals(scene: Scene, proposals: MaskSet, info: list[ProposalInfo],
                    recipe: ProposalRecipe) -> None:
    """Assert the construction guarantees on a generated proposal set."""
    for g, inst in enumerate(scene.instances):
        mine = [i for i, p in enumerate(info) if p.instance == g]
        if not any(iou(proposals[i], inst.mask) > 0.8 for i in mine):
            raise AssertionError(f"instance {g} has no near-complete proposal")
        frags = [i for i in mine if info[i].kind == "fragment"]
        for i in frags:
            m = proposals[i]
            if not (iou(m, inst.mask) < 0.5 and m.intersect(inst.mask).area / m.area > 0.9):
                raise AssertionError(f"proposal {i} is not a valid fragment of instance {g}")
    for i, p in enumerate(info):
        if p.kind == "background" and any(proposals[i].intersect(inst.mask).runs for inst in scene.instances):
            raise AssertionError(f"background proposal {i} touches an instance")


def proposals_to_dict(proposals: MaskSet, info: list[ProposalInfo]) -> dict:
    return {"h": proposals.height, "w": proposals.width,
            "masks": [m.to_dict() for m in proposals],
            "provenance": [{"instance": p.instance, "kind": p.kind} for p in info]}


def proposals_from_dict(data: Mapping) -> tuple[MaskSet, list[ProposalInfo]]:
    h, w = int(data["h"]), int(data["w"])
    masks = MaskSet(h, w, tuple(BinaryMask.from_dict(m) for m in data["masks"]))
    prov = data.get("provenance") or [{"instance": -1, "kind": "unknown"}] * len(masks)
    if len(prov) != len(masks):
        raise ValueError(f"{len(prov)} provenance records for {len(masks)} masks")
    return masks, [ProposalInfo(int(p["instance"]), str(p["kind"])) for p in prov]


def generate_peaks(scene: Scene, proposals: MaskSet, info: list[ProposalInfo]) -> list[PeakCue]:
    """One peak per instance, at the centre of its lowest-index fragment.

    Peak scores grow with instance area (area over canvas size).  Instances
    without fragments get a peak at the centre of their main box.
    """
    canvas_area = scene.height * scene.width
    peaks = []
    for g, inst in enumerate(scene.instances):
        frags = [i for i, p in enumerate(info) if p.instance == g and p.kind == "fragment"]
        t, l, b, r = proposals[frags[0]].bbox() if frags else inst.boxes[0]
        peaks.append(PeakCue(inst.category, inst.mask.area / canvas_area, ((t + b - 1) // 2, (l + r - 1) // 2)))
    return peaks


# -- surrogate scorer -------------------------------------------------------

@dataclass(frozen=True)
class ScorerConfig:
    eta: float = 0.5
    fragment_bias: float = 0.4
    cls_noise: float = 0.05
    iou_noise: float = 0.08
    score_floor: float = 0.01

    def __post_init__(self):
        if not 0 <= self.eta <= 1:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if not 0 <= self.score_floor < 0.5:
            raise ValueError(f"score_floor must be in [0, 0.5), got {self.score_floor}")

    from_dict = classmethod(_from_mapping)


@dataclass
class SurrogateScorer:
    """Classification and integrity tables standing in for the network heads."""

    y: np.ndarray
    t: np.ndarray
    eta: float = 0.5
    affinity: np.ndarray | None = None  # fraction of each proposal lying on each instance

    def copy(self) -> SurrogateScorer:
        return SurrogateScorer(self.y.copy(), self.t.copy(), self.eta, self.affinity)


def init_scorer(scene: Scene, proposals: MaskSet, cfg: ScorerConfig,
                rng: np.random.Generator) -> SurrogateScorer:
    n, c1 = len(proposals), scene.num_categories + 1
    gt_masks = [inst.mask for inst in scene.instances]
    overlap = cross_iou(proposals.masks, gt_masks)
    areas = np.array([max(m.area, 1) for m in proposals], dtype=float)
    affinity = np.array([[m.intersect(g).area for g in gt_masks] for m in proposals], dtype=float)
    affinity /= areas[:, None]

    on_object = np.zeros((n, c1))
    quality = np.zeros((n, c1))
    for g, inst in enumerate(scene.instances):
        c = inst.category
        on_object[:, c] = np.maximum(on_object[:, c], affinity[:, g])
        quality[:, c] = np.maximum(quality[:, c], overlap[:, g])

    y = on_object * (1.0 - cfg.fragment_bias * quality) + rng.normal(0, cfg.cls_noise, (n, c1))
    y[:, 0] = 1.0 - on_object[:, 1:].max(axis=1, initial=0.0) + rng.normal(0, cfg.cls_noise, n)
    t = quality + rng.normal(0, cfg.iou_noise, (n, c1))
    t[:, 0] = y[:, 0]
    # classification scores stay off 0 and 1, like a softmax output would
    return SurrogateScorer(np.clip(y, cfg.score_floor, 1 - cfg.score_floor), np.clip(t, 0, 1),
                           cfg.eta, affinity)


def surrogate_update(scorer: SurrogateScorer, labels: RefinedLabels,
                     update_integrity: bool = True) -> SurrogateScorer:
    """Move labeled rows toward their targets by ``eta * w``; unlabeled rows are untouched."""
    out = scorer.copy()
    rows = labels.labeled
    step = (scorer.eta * labels.w)[:, None]
    y_new = (1 - step) * scorer.y + step * labels.y_hat
    out.y[rows] = np.clip(y_new[rows], 0, 1)
    if update_integrity:
        t_new = (1 - step) * scorer.t + step * labels.t_hat
        out.t[rows] = np.clip(t_new[rows], 0, 1)
    return out


def precomputed_as_refined(labels: PrecomputedLabels) -> RefinedLabels:
    """Unit-weight view of pre-computed labels, for supervising the anti-noise branch."""
    y = labels.y_hat0
    labeled = y.any(axis=1)
    return RefinedLabels(y.copy(), np.zeros_like(y), labeled.astype(float),
                         int(labels.foreground.sum()), int(labels.background.sum()),
                         np.full(len(y), -1, dtype=np.int64))


@dataclass(frozen=True)
class RunConfig:
    cim: CimConfig = field(default_factory=CimConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    alpha: float = ALPHA
    sample: bool = True
    image_score_mode: str = "clamp"

    def to_dict(self) -> dict:
        return {**self.cim.to_dict(), **asdict(self.scorer), "alpha": self.alpha,
                "sample": self.sample, "image_score_mode": self.image_score_mode}

    @classmethod
    def from_dict(cls, data: Mapping) -> RunConfig:
        return cls(cim=CimConfig.from_dict(data), scorer=ScorerConfig.from_dict(data),
                   alpha=float(data.get("alpha", ALPHA)), sample=bool(data.get("sample", True)),
                   image_score_mode=str(data.get("image_score_mode", "clamp")))


@dataclass
class BranchRecord:
    k: int
    seeds: dict[int, list[int]]
    pseudo_gt: PseudoGroundTruth
    labels: RefinedLabels
    loss: RefinementTerms
    y: np.ndarray  # branch output tables after supervision
    t: np.ndarray
    sampled_gt: PseudoGroundTruth | None = None

    def to_dict(self) -> dict:
        return {
            "branch": self.k,
            "thresholds": list(self.labels.thresholds),
            "seeds": {str(c): v for c, v in sorted(self.seeds.items())},
            "pseudo_gt": self.pseudo_gt.to_dict(),
            "sampled_gt": None if self.sampled_gt is None else self.sampled_gt.to_dict(),
            "labels": self.labels.to_dict(),
            "loss": {"classification": self.loss.classification, "integrity": self.loss.integrity,
                     "total": self.loss.total},
        }


@dataclass
class Trajectory:
    supports: list[SupportMask]
    precomputed: PrecomputedLabels
    clusters: ProposalClusterSet
    branches: list[BranchRecord]
    loss: LossReport
    fused: np.ndarray  # mean over branches of classification x integrity

    def to_dict(self) -> dict:
        return {
            "agpl": {
                "supports": [{"peak": s.peak_index, "cat": s.category, "score": s.peak_score,
                              "supporters": s.supporter_count, "mask": s.mask.to_dict()}
                             for s in self.supports],
                "labels": [[int(i), int(c)] for i, c in zip(*np.nonzero(self.precomputed.y_hat0))],
                "clusters": [{"members": list(cl.members), "cat": cl.category} for cl in self.clusters],
            },
            "branches": [b.to_dict() for b in self.branches],
            "loss": self.loss.to_dict(),
        }


def run_refinement(scene: Scene, proposals: MaskSet, peaks: list[PeakCue], cfg: RunConfig,
                   seed: int) -> Trajectory:
    """AGPL labels for the anti-noise branch, then K chained CIM refinement branches.

    Branch k mines pseudo ground truth from the tables branch k-1 produced and
    its labels supervise the scorer before branch k+1 reads it.  The anti-noise
    branch only receives classification supervision.
    """
    image_label = scene.image_label
    scorer = init_scorer(scene, proposals, cfg.scorer, np.random.default_rng(derive_seed(seed, "scorer")))
    sampler = SamplerState(derive_seed(seed, "sampler")) if cfg.sample else None

    supports = compute_support_masks(proposals, peaks)
    pre = assign_precomputed_labels(proposals, supports, scene.num_categories)
    clusters = build_clusters(pre)
    anti = anti_noise_loss(scorer.y, scorer.t, image_label, clusters, cfg.alpha,
                           mode=cfg.image_score_mode)
    scorer = surrogate_update(scorer, precomputed_as_refined(pre), update_integrity=False)

    records = []
    for k in range(1, cfg.cim.branches + 1):
        y_prev, t_prev = scorer.y, scorer.t
        resample = None
        if sampler is not None:
            def resample(gt: PseudoGroundTruth) -> PseudoGroundTruth:
                return anti_noise_sample(gt, gt.entry_weights(y_prev, t_prev), sampler)
        res = run_cim_branch(y_prev, t_prev, proposals, image_label, k, cfg.cim, resample)
        terms = refinement_loss(scorer.y, scorer.t, res.labels)
        scorer = surrogate_update(scorer, res.labels)
        records.append(BranchRecord(k, res.seeds, res.pseudo_gt, res.labels, terms,
                                    scorer.y.copy(), scorer.t.copy(), res.sampled_gt))

    fused = np.mean([r.y * r.t for r in records], axis=0)
    report = LossReport.build([r.loss for r in records], anti)
    return Trajectory(supports, pre, clusters, records, report, fused)


def branch_mining_stats(k: int, seeds: Mapping[int, list[int]], gt: PseudoGroundTruth,
                        scene: Scene, proposals: MaskSet) -> dict:
    """Mean IoU of a branch's seeds and pseudo ground truth with their best same-category instance."""

    def best_iou(idx: int, cat: int) -> float:
        return max((iou(proposals[idx], inst.mask) for inst in scene.instances if inst.category == cat),
                   default=0.0)

    seed_ious = [best_iou(i, c) for c, idxs in sorted(seeds.items()) for i in idxs]
    gt_ious = [best_iou(e.index, e.category) for e in gt.flat()]
    return {
        "branch": k,
        "seed_count": len(seed_ious),
        "pseudo_gt_count": len(gt_ious),
        "seed_iou": float(np.mean(seed_ious)) if seed_ious else 0.0,
        "pseudo_gt_iou": float(np.mean(gt_ious)) if gt_ious else 0.0,
    }


def mining_quality(traj: Trajectory, scene: Scene, proposals: MaskSet) -> list[dict]:
    return [branch_mining_stats(r.k, r.seeds, r.pseudo_gt, scene, proposals) for r in traj.branches]
