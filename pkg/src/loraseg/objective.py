"""Focal Tversky loss for class-imbalanced binary segmentation.

Per image: TP = sum(p*t), FP = sum(p*(1-t)), FN = sum((1-p)*t),
TI = (TP + eps) / (TP + alpha*FP + beta*FN + eps), loss = (1 - TI)^gamma,
reduced by the mean over the batch. alpha weights false positives, beta
false negatives.
"""

from __future__ import annotations

import torch

from .errors import ShapeError

# Bound applied in inverse-exponent mode, where (1-TI)^(1/gamma) has an
# unbounded derivative as TI -> 1. The default power mode is smooth on all
# of [0, 1], so probabilities pass through unclamped and a perfect binary
# prediction yields loss == 0 exactly.
SATURATION_CLAMP = 1e-7


def focal_tversky(probs, targets, spec):
    """Mean per-image focal Tversky loss; differentiable w.r.t. `probs`."""
    if probs.shape != targets.shape:
        raise ShapeError(
            f"probs shape {tuple(probs.shape)} != targets shape {tuple(targets.shape)}"
        )
    if probs.ndim < 2:
        raise ShapeError("expected a batched tensor (batch dimension first)")
    t = targets.to(probs.dtype)
    if not torch.all((t == 0) | (t == 1)):
        raise ShapeError("targets must be binary (0/1)")
    with torch.no_grad():
        if probs.min() < 0 or probs.max() > 1:
            raise ShapeError("probs must lie in [0, 1]")

    p = probs
    if spec.exponent_mode == "inverse":
        p = p.clamp(SATURATION_CLAMP, 1.0 - SATURATION_CLAMP)

    batch = p.shape[0]
    p = p.reshape(batch, -1)
    t = t.reshape(batch, -1)
    tp = (p * t).sum(dim=1)
    fp = (p * (1.0 - t)).sum(dim=1)
    fn = ((1.0 - p) * t).sum(dim=1)
    ti = (tp + spec.epsilon) / (tp + spec.alpha * fp + spec.beta * fn + spec.epsilon)
    exponent = spec.gamma if spec.exponent_mode == "power" else 1.0 / spec.gamma
    per_image = torch.clamp(1.0 - ti, min=0.0) ** exponent
    return per_image.mean()
