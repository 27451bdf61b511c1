"""Per-tap residual decoding, concatenation fusion, prior-initialized 1x1 head.

Each tap map goes through its own branch: a 1x1 projection to
branch_channels, then one residual block (conv3x3-BN-ReLU, conv3x3-BN,
identity skip, ReLU after the addition). Branch outputs are concatenated,
a 1x1 convolution produces a single logit map at token-grid resolution,
which is bilinearly upsampled to the image size before the sigmoid.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


def bias_prior(pi: float) -> float:
    """Logit of the foreground pixel ratio, b0 = log(pi / (1 - pi))."""
    if not 0.0 < pi < 1.0:
        raise ConfigError(f"foreground prior must lie strictly in (0, 1), got {pi}")
    return math.log(pi / (1.0 - pi))


class ResidualBranch(nn.Module):
    def __init__(self, in_channels, channels):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, channels, kernel_size=1)
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        y = self.proj(x)
        out = F.relu(self.bn1(self.conv1(y)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + y)


class DecoderHead(nn.Module):
    """Parallel residual branches + fusion conv; output (B, 1, image, image)."""

    def __init__(self, embed_dim, image_size, n_branches, branch_channels):
        super().__init__()
        self.embed_dim = embed_dim
        self.image_size = image_size
        self.branches = nn.ModuleList(
            ResidualBranch(embed_dim, branch_channels) for _ in range(n_branches)
        )
        self.fuse = nn.Conv2d(n_branches * branch_channels, 1, kernel_size=1)

    def logits(self, pyramid):
        if len(pyramid) != len(self.branches):
            raise ShapeError(
                f"decoder built for {len(self.branches)} taps, pyramid has {len(pyramid)}"
            )
        for m in pyramid.maps:
            if m.shape[1] != self.embed_dim:
                raise ShapeError(
                    f"pyramid channels {m.shape[1]} do not match embed_dim {self.embed_dim}"
                )
        decoded = [branch(m) for branch, m in zip(self.branches, pyramid.maps)]
        fused = torch.cat(decoded, dim=1)
        logit = self.fuse(fused)
        return F.interpolate(
            logit, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False
        )

    def forward(self, pyramid):
        return torch.sigmoid(self.logits(pyramid))


def init_head(head, spec, foreground_prior=None):
    """Set the fusion bias to the class-prior logit (or 0 when disabled).

    Convolution weights keep their standard fan-in initialization.
    """
    pi = spec.foreground_prior if spec.foreground_prior is not None else foreground_prior
    if spec.use_bias_prior and pi is not None:
        b0 = bias_prior(pi)
    else:
        b0 = 0.0
    with torch.no_grad():
        head.fuse.bias.fill_(b0)
    return b0
