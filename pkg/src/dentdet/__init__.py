"""Diffusion-based hierarchical multi-label tooth detection."""

from .diffusion import NoisyBoxes, Schedule, ddim_step, forward_noise, pad_gt_boxes
from .geometry import Box, giou, iou, nms
from .labels import (
    HEAD_NAMES,
    NUM_DIAGNOSES,
    NUM_ENUMERATIONS,
    NUM_QUADRANTS,
    HeadMask,
    HierarchyLevel,
    LabelTriple,
    mask_for,
)
from .manipulate import InferredBox, InferredBoxCache, manipulate_boxes
from .matching import Detection, LossBreakdown, compute_loss, match
from .model import (
    ModelConfig,
    decode,
    encode_image,
    init_params,
    load_checkpoint,
    loss_gradients,
    save_checkpoint,
    transfer_weights,
)

__version__ = "0.1.0"

__all__ = [
    "Box",
    "Detection",
    "HEAD_NAMES",
    "NUM_DIAGNOSES",
    "NUM_ENUMERATIONS",
    "HeadMask",
    "HierarchyLevel",
    "InferredBox",
    "InferredBoxCache",
    "LabelTriple",
    "LossBreakdown",
    "ModelConfig",
    "NUM_QUADRANTS",
    "NoisyBoxes",
    "Schedule",
    "compute_loss",
    "ddim_step",
    "decode",
    "encode_image",
    "forward_noise",
    "giou",
    "init_params",
    "iou",
    "load_checkpoint",
    "loss_gradients",
    "manipulate_boxes",
    "mask_for",
    "match",
    "nms",
    "pad_gt_boxes",
    "save_checkpoint",
    "transfer_weights",
    "__version__",
]
