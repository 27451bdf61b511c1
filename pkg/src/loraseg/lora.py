"""Low-rank adapters injected into attention projections of a frozen encoder.

An adapted projection computes y = Wx + b + s * B(Ax) where W, b stay
frozen, A (rank x dim) starts gaussian(std 0.02), B (dim x rank) starts
zero, so injection is an exact no-op until training moves B.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .errors import CheckpointError, InjectionError, ShapeError

ADAPTER_INIT_STD = 0.02


class LoraLinear(nn.Linear):
    """nn.Linear plus a trainable low-rank residual; base tensors keep their names."""

    def __init__(self, in_features, out_features, rank, scale, host="", bias=True):
        super().__init__(in_features, out_features, bias=bias)
        self.rank = rank
        self.scale = scale
        self.host = host
        self.lora_down = nn.Parameter(torch.empty(rank, in_features))
        self.lora_up = nn.Parameter(torch.zeros(out_features, rank))
        nn.init.normal_(self.lora_down, std=ADAPTER_INIT_STD)

    @classmethod
    def from_linear(cls, linear, rank, scale, host=""):
        wrapped = cls(
            linear.in_features,
            linear.out_features,
            rank,
            scale,
            host=host,
            bias=linear.bias is not None,
        )
        wrapped.weight = linear.weight
        if linear.bias is not None:
            wrapped.bias = linear.bias
        return wrapped

    def forward(self, x):
        base = F.linear(x, self.weight, self.bias)
        return base + self.scale * F.linear(F.linear(x, self.lora_down), self.lora_up)

    def extra_repr(self):
        return f"{super().extra_repr()}, rank={self.rank}, scale={self.scale}, host={self.host!r}"


def inject(encoder, spec):
    """Wrap the configured attention projections of every block. Returns adapters."""
    if not spec.enabled:
        raise InjectionError("cannot inject: lora.enabled is false")
    if not getattr(encoder, "frozen", False):
        raise InjectionError("encoder must be frozen before adapter injection")
    if spec.rank > encoder.embed_dim:
        raise InjectionError(f"rank {spec.rank} exceeds embed_dim {encoder.embed_dim}")
    adapters = []
    for i, block in enumerate(encoder.blocks):
        for proj in spec.target_projections:
            current = getattr(block.attn, proj)
            if isinstance(current, LoraLinear):
                raise InjectionError(f"blocks.{i}.attn.{proj} already carries an adapter")
            wrapped = LoraLinear.from_linear(
                current, spec.rank, spec.scale, host=f"blocks.{i}.attn.{proj}"
            )
            setattr(block.attn, proj, wrapped)
            adapters.append(wrapped)
    return adapters


def effective_weight(weight, adapter):
    """Dense merge W + s*B@A; multiplying by it equals the adapted projection."""
    delta = adapter.lora_up @ adapter.lora_down
    if delta.shape != weight.shape:
        raise ShapeError(
            f"adapter update shape {tuple(delta.shape)} does not match weight {tuple(weight.shape)}"
        )
    return weight + adapter.scale * delta


def adapter_parameters(module):
    for name, p in module.named_parameters():
        if "lora_" in name:
            yield name, p


def adapter_state(module):
    """Adapter tensors only, keyed by qualified parameter name."""
    return {name: p.detach().cpu().numpy() for name, p in adapter_parameters(module)}


def load_adapter_state(module, mapping):
    expected = dict(adapter_parameters(module))
    unknown = [k for k in mapping if k not in expected]
    if unknown:
        raise CheckpointError(f"unknown adapter tensors: {sorted(unknown)}")
    missing = [k for k in expected if k not in mapping]
    if missing:
        raise CheckpointError(f"missing adapter tensors: {sorted(missing)}")
    with torch.no_grad():
        for name, param in expected.items():
            src = torch.as_tensor(mapping[name])
            if tuple(src.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"shape mismatch for '{name}': {tuple(src.shape)} vs {tuple(param.shape)}"
                )
            param.copy_(src.to(param.dtype))


def save_adapters(module, path, meta=None):
    return save_archive(path, adapter_state(module), component="adapters", meta=meta or {})


def load_adapters(module, path):
    archive = load_archive(path)
    if archive.component != "adapters":
        raise CheckpointError(f"{path}: expected an adapters archive, got '{archive.component}'")
    load_adapter_state(module, archive.tensors)
    return archive
