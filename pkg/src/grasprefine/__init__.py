"""Grasp detection mathematics: rotated-rectangle geometry, regression-target
codecs, training losses, a probability-map refinement head and the Jaccard
grasp evaluation protocol."""

from .geometry import (
    OrientedRect,
    angle_distance,
    axis_aligned_iou,
    polygon_area,
    polygon_clip,
    rect_corners,
    rotated_iou,
)
from .codec import (
    GraspCandidate,
    OrientationBins,
    RegionProposal,
    class_to_orientation,
    decode_box_targets,
    decode_refine_targets,
    encode_box_targets,
    encode_refine_targets,
    grasp_to_rect,
    orientation_to_class,
)

__version__ = "0.1.0"
