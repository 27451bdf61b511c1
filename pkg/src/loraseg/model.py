"""Assembly of the full segmentation model from a configuration."""

from __future__ import annotations

import torch
import torch.nn as nn

from .backbone import ViTEncoder, freeze
from .decoder import DecoderHead, init_head
from .lora import inject


class SegModel(nn.Module):
    """Frozen (LoRA-adapted) encoder -> feature pyramid -> decoder head."""

    def __init__(self, encoder, head):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, images):
        return self.head(self.encoder.forward_with_taps(images))


def build_model(config, foreground_prior=None, seed=None) -> SegModel:
    """Instantiate encoder + adapters + head.

    With `seed` given, weight init is reproducible regardless of ambient
    RNG state (the trainer and checkpoint loader rely on this to rebuild
    the identical frozen encoder).
    """
    if seed is not None:
        torch.manual_seed(seed)
    encoder = ViTEncoder(config.backbone)
    freeze(encoder)
    adapters = []
    if config.lora.enabled:
        adapters = inject(encoder, config.lora)
    head = DecoderHead(
        embed_dim=config.backbone.embed_dim,
        image_size=config.backbone.image_size,
        n_branches=len(config.backbone.tap_indices),
        branch_channels=config.decoder.branch_channels,
    )
    init_head(head, config.decoder, foreground_prior=foreground_prior)
    model = SegModel(encoder, head)
    model.adapters = adapters
    return model


def trainable_parameters(model):
    return [p for p in model.parameters() if p.requires_grad]


def trainable_parameter_count(model) -> int:
    return sum(p.numel() for p in trainable_parameters(model))
