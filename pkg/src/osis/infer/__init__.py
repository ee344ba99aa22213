"""Open-set inference: anchors, prototypes, association and unknown clustering."""

from .association import Assignment, Prototype, assign_points, association_score, score_matrix
from .clustering import NOISE, ClusteringConfig, cluster_unknowns, combined_sq_distance, dbscan
from .detection import Anchor, box_iou, extract_anchors, nms
from .pipeline import (CLOSED_SET, CLUSTERED, InferenceConfig, SegmentationResult, compose_result,
                       empty_result, read_result, segment_scene, with_clustering, write_result)

__all__ = [
    "Anchor", "Assignment", "CLOSED_SET", "CLUSTERED", "ClusteringConfig", "InferenceConfig", "NOISE",
    "Prototype", "SegmentationResult", "assign_points", "association_score", "box_iou", "cluster_unknowns",
    "combined_sq_distance", "compose_result", "dbscan", "empty_result", "extract_anchors", "nms",
    "read_result", "score_matrix", "segment_scene", "with_clustering", "write_result",
]
