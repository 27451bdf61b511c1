"""Prompt-free, parameter-efficient nuclei segmentation.

A frozen ViT image encoder (optionally initialized from SAM ViT-B weights)
is adapted with low-rank adapters in its attention projections; feature
maps tapped from several blocks are decoded by lightweight residual
branches, fused, and turned into a binary mask by a prior-initialized 1x1
head. Training optimizes only adapters + decoder with a focal Tversky
objective.
"""

from .config import (
    ExperimentConfig,
    apply_overrides,
    config_digest,
    count_trainable_params,
    load_config,
    model_digest,
    save_config,
    toy_config,
)
from .model import SegModel, build_model, trainable_parameter_count

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "SegModel",
    "apply_overrides",
    "build_model",
    "config_digest",
    "count_trainable_params",
    "load_config",
    "model_digest",
    "save_config",
    "toy_config",
    "trainable_parameter_count",
    "__version__",
]
