"""Pseudo-label mining for weakly supervised instance segmentation.

The pipeline runs on run-length encoded masks:

- ``agpl``: peak-guided support masks, pre-computed labels and proposal clusters
- ``cim``: seed selection, complete-instance mining and cascaded label assignment
- ``losses``: objective evaluation and anti-noise resampling
- ``synth``: synthetic scenes and a surrogate scorer to drive the loop
- ``evaluation``: mask mAP at fixed IoU thresholds
"""

__version__ = "0.1.0"

from .agpl import PeakCue, assign_precomputed_labels, build_clusters, compute_support_masks
from .cim import CimConfig, PseudoGroundTruth, RefinedLabels, assign_refined_labels, mine_pseudo_gt, select_seeds
from .evaluation import Prediction, average_precision, evaluate, match_predictions
from .losses import SamplerState, anti_noise_loss, anti_noise_sample, refinement_loss
from .masks import BinaryMask, MaskSet, containment_matrix, iou, mask_nms, mean_threshold

__all__ = [
    "BinaryMask", "MaskSet", "iou", "containment_matrix", "mask_nms", "mean_threshold",
    "PeakCue", "compute_support_masks", "assign_precomputed_labels", "build_clusters",
    "CimConfig", "PseudoGroundTruth", "RefinedLabels", "select_seeds", "mine_pseudo_gt",
    "assign_refined_labels", "SamplerState", "refinement_loss", "anti_noise_loss",
    "anti_noise_sample", "Prediction", "match_predictions", "average_precision", "evaluate",
]
