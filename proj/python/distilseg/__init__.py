"""One-shot 3D segmentation by registration-based augmentation and feature distillation."""

from ._core import (
    Error,
    RuntimeFailure,
    ValidationError,
    bending_energy,
    dice,
    diffusion,
    hd95,
    hint_loss,
    infer,
    local_cc_loss,
    make_toy,
    mi_loss,
    ncc,
    run,
    warp_labels,
    warp_volume,
)

__all__ = [
    "Error",
    "RuntimeFailure",
    "ValidationError",
    "bending_energy",
    "dice",
    "diffusion",
    "hd95",
    "hint_loss",
    "infer",
    "local_cc_loss",
    "make_toy",
    "mi_loss",
    "ncc",
    "run",
    "warp_labels",
    "warp_volume",
]
