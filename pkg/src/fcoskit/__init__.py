"""Anchor-free per-location detection mathematics: targets, losses, decoding, evaluation."""

from .assignment import (
    LocationTarget,
    TargetSet,
    ambiguity_stats,
    assign_level,
    build_targets,
    center_sampling_region,
    centerness_target,
    encode_targets,
    map_location,
)
from .config import AnchorConfig, FocalParams, FpnConfig, InferenceOptions, LossOptions, ResizeSpec
from .estimators import FCOSPostprocessor, FCOSTargetEncoder, LinearFCOSHead
from .geometry import Box, LabeledBox, area, enclosing_box, iou
from .inference import Detection, decode, nms, run_inference

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig", "Box", "Detection", "FCOSPostprocessor", "FCOSTargetEncoder", "FocalParams",
    "FpnConfig", "InferenceOptions", "LabeledBox", "LinearFCOSHead", "LocationTarget", "LossOptions",
    "ResizeSpec", "TargetSet", "ambiguity_stats", "area", "assign_level", "build_targets",
    "center_sampling_region", "centerness_target", "decode", "enclosing_box", "encode_targets", "iou",
    "map_location", "nms", "run_inference",
]
