"""Oriented bounding boxes from multi-scale per-cell classification.

A small encoder-decoder predicts a class for every grid cell at five
scales; connected same-class regions are turned into minimum-area oriented
rectangles and refined by rotated NMS.
"""

__version__ = "0.1.0"

from .boxdet import Detection, decode_heads, determine_boxes
from .errors import (
    DegenerateGeometry,
    FormatError,
    InvalidAnnotation,
    InvalidArgument,
    InvalidConfig,
    InvalidState,
    ObbsegError,
    ParseError,
    PlacementError,
    UnknownClass,
)
from .geometry import (
    OrientedBox,
    convex_clip,
    convex_hull,
    corners_to_obb,
    iou_matrix,
    min_area_rect,
    obb_to_corners,
    rotate_box,
    rotated_iou,
)
from .refine import NmsConfig, cross_scale_merge, nms_per_scale, refine
from .targets import (
    Annotation,
    ScaleSpec,
    build_rotation_batch,
    encode_targets,
    make_scales,
    tile_image,
)

__all__ = [
    "Annotation",
    "DegenerateGeometry",
    "Detection",
    "FormatError",
    "InvalidAnnotation",
    "InvalidArgument",
    "InvalidConfig",
    "InvalidState",
    "NmsConfig",
    "ObbsegError",
    "OrientedBox",
    "ParseError",
    "PlacementError",
    "ScaleSpec",
    "UnknownClass",
    "build_rotation_batch",
    "convex_clip",
    "convex_hull",
    "corners_to_obb",
    "cross_scale_merge",
    "decode_heads",
    "determine_boxes",
    "encode_targets",
    "iou_matrix",
    "make_scales",
    "min_area_rect",
    "nms_per_scale",
    "obb_to_corners",
    "refine",
    "rotate_box",
    "rotated_iou",
    "tile_image",
]
