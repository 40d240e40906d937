"""Label assignment, NMS-free post-processing and evaluation for dense detectors.

Submodules:

* ``geometry``     boxes, points and IoU-family overlaps
* ``costs``        classification and location matching costs
* ``assign``       one-to-many, min-cost and bipartite label assignment
* ``postprocess``  NMS, score filtering and score-gap statistics
* ``metrics``      COCO-style AP, log-average miss rate, recall, redundancy
* ``theory``       one-to-one perceptron simulator with margin certificates
* ``toydet``       synthetic scenes and a tiny trainable dense detector
* ``cli``          command-line entry point
"""

from .geometry import BBox, GridPoint, GroundTruth, iou, giou
from .costs import Candidate, CostWeights, CostMatrix, build_cost_matrix
from .assign import AssignConfig, Assignment, ThresholdRule, assign, assign_bipartite
from .postprocess import Detection, nms, score_filter, score_gap

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "GridPoint",
    "GroundTruth",
    "iou",
    "giou",
    "Candidate",
    "CostWeights",
    "CostMatrix",
    "build_cost_matrix",
    "AssignConfig",
    "Assignment",
    "ThresholdRule",
    "assign",
    "assign_bipartite",
    "Detection",
    "nms",
    "score_filter",
    "score_gap",
]
