"""Frozen ViT image encoder emitting feature maps at configured tap blocks.

Plain pre-norm ViT: conv patch embedding, learned positional grid, global
attention in every block (no windowing, no neck). Tap outputs are raw
post-block token states reshaped to channel-first grids in the row-major
raster order of the patch scan.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .archive import load_archive, save_archive
from .errors import CheckpointError, ShapeError

LAYERNORM_EPS = 1e-6


@dataclass
class FeaturePyramid:
    """Ordered (tap_index, feature map) pairs; maps are (B, C, gh, gw)."""

    taps: list
    maps: list

    def __post_init__(self):
        if len(self.taps) != len(self.maps):
            raise ShapeError("pyramid taps and maps differ in length")
        shapes = {tuple(m.shape[2:]) for m in self.maps}
        if len(shapes) > 1:
            raise ShapeError(f"pyramid entries disagree on spatial shape: {shapes}")

    def __len__(self):
        return len(self.maps)

    def __iter__(self):
        return iter(zip(self.taps, self.maps))


class Attention(nn.Module):
    def __init__(self, dim, num_heads):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.output = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        q = self.query(x).reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.key(x).reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.value(x).reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.output(out)


class Mlp(nn.Module):
    def __init__(self, dim, hidden_dim):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, dim, num_heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LAYERNORM_EPS)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, eps=LAYERNORM_EPS)
        self.mlp = Mlp(dim, int(mlp_ratio * dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class ViTEncoder(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.image_size = spec.image_size
        self.patch_size = spec.patch_size
        self.embed_dim = spec.embed_dim
        self.depth = spec.depth
        self.tap_indices = list(spec.tap_indices)
        self.frozen = False
        grid = spec.image_size // spec.patch_size
        self.patch_embed = nn.Conv2d(
            3, spec.embed_dim, kernel_size=spec.patch_size, stride=spec.patch_size
        )
        self.pos_embed = nn.Parameter(torch.empty(1, grid, grid, spec.embed_dim))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(spec.embed_dim, spec.num_heads, spec.mlp_ratio)
            for _ in range(spec.depth)
        )

    def _embed(self, images):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        _, _, h, w = images.shape
        if h % self.patch_size or w % self.patch_size:
            raise ShapeError(
                f"spatial size {h}x{w} not divisible by patch size {self.patch_size}"
            )
        x = self.patch_embed(images)  # (B, C, gh, gw)
        gh, gw = x.shape[2], x.shape[3]
        pos = self.pos_embed
        if pos.shape[1] != gh or pos.shape[2] != gw:
            pos = interpolate_pos_embed(pos, (gh, gw))
        x = x.flatten(2).transpose(1, 2)  # (B, N, C), row-major raster
        x = x + pos.reshape(1, gh * gw, -1).to(x.dtype)
        return x, (gh, gw)

    def forward_with_taps(self, images, taps=None) -> FeaturePyramid:
        taps = self.tap_indices if taps is None else list(taps)
        if not taps:
            raise ShapeError("tap list is empty")
        x, (gh, gw) = self._embed(images)
        wanted = set(taps)
        collected = {}
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in wanted:
                collected[i] = x.transpose(1, 2).reshape(x.shape[0], -1, gh, gw)
            if i >= max(wanted):
                break
        missing = [t for t in taps if t not in collected]
        if missing:
            raise ShapeError(f"tap indices {missing} outside block range 1..{self.depth}")
        return FeaturePyramid(taps=taps, maps=[collected[t] for t in taps])

    def forward(self, images):
        return self.forward_with_taps(images, taps=[self.depth]).maps[0]


def interpolate_pos_embed(pos, grid):
    """Bilinearly resize a (1, gh, gw, C) positional grid to `grid`."""
    resized = F.interpolate(
        pos.permute(0, 3, 1, 2), size=grid, mode="bilinear", align_corners=False
    )
    return resized.permute(0, 2, 3, 1)


def base_parameter_names(module):
    """Names of frozen-eligible base parameters (adapters excluded)."""
    return [name for name, _ in module.named_parameters() if "lora_" not in name]


def freeze(encoder):
    """Exclude every base parameter from gradient computation. Idempotent."""
    for name, p in encoder.named_parameters():
        if "lora_" not in name:
            p.requires_grad_(False)
    encoder.frozen = True


def base_parameter_digest(module) -> str:
    """SHA-256 over all base parameters; bitwise frozen-invariance witness."""
    h = hashlib.sha256()
    for name in sorted(base_parameter_names(module)):
        param = dict(module.named_parameters())[name]
        h.update(name.encode("utf-8"))
        h.update(param.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_encoder(encoder, path):
    tensors = {
        name: param.detach().cpu().numpy()
        for name, param in encoder.named_parameters()
        if "lora_" not in name
    }
    meta = {
        "image_size": encoder.image_size,
        "patch_size": encoder.patch_size,
        "embed_dim": encoder.embed_dim,
        "depth": encoder.depth,
    }
    return save_archive(path, tensors, component="encoder", meta=meta)


def load_state(encoder, tensors) -> int:
    """Copy named arrays into the encoder's base parameters.

    Positional embeddings are bilinearly resized when grids differ. Extra
    names are ignored (pretrained checkpoints carry necks etc.); missing
    base parameters are an error listing every absent name.
    """
    params = {n: p for n, p in encoder.named_parameters() if "lora_" not in n}
    missing = [n for n in params if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint missing encoder tensors: {sorted(missing)}")
    loaded = 0
    with torch.no_grad():
        for name, param in params.items():
            src = torch.as_tensor(np.ascontiguousarray(tensors[name]))
            if name == "pos_embed" and tuple(src.shape) != tuple(param.shape):
                if src.ndim != 4 or src.shape[-1] != param.shape[-1]:
                    raise CheckpointError(
                        f"pos_embed shape {tuple(src.shape)} incompatible with {tuple(param.shape)}"
                    )
                src = interpolate_pos_embed(src.float(), tuple(param.shape[1:3]))
            if tuple(src.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"shape mismatch for '{name}': checkpoint {tuple(src.shape)} "
                    f"vs model {tuple(param.shape)}"
                )
            param.copy_(src.to(param.dtype))
            loaded += 1
    return loaded


def load_pretrained(encoder, checkpoint_path, name_map=None) -> int:
    """Load base weights from an archive file, translating names via `name_map`."""
    archive = load_archive(checkpoint_path)
    tensors = archive.tensors
    if name_map:
        tensors = {name_map.get(k, k): v for k, v in tensors.items()}
    return load_state(encoder, tensors)


def convert_sam_state(state, depth) -> dict:
    """Translate a SAM ViT image-encoder state dict into this encoder's names.

    Handles the 'image_encoder.' prefix, splits fused qkv projections into
    separate query/key/value tensors, and drops relative-position tables and
    the neck (SAM's windowed blocks are treated as plain global-attention
    blocks; documented approximation).
    """
    out = {}
    for key, value in state.items():
        name = key[len("image_encoder.") :] if key.startswith("image_encoder.") else key
        if name.startswith("neck.") or ".attn.rel_pos" in name:
            continue
        value = np.asarray(value)
        if name == "patch_embed.proj.weight":
            out["patch_embed.weight"] = value
        elif name == "patch_embed.proj.bias":
            out["patch_embed.bias"] = value
        elif name == "pos_embed":
            out["pos_embed"] = value
        elif ".attn.qkv." in name:
            prefix, _, kind = name.partition(".attn.qkv.")
            for part, arr in zip(("query", "key", "value"), np.split(value, 3, axis=0)):
                out[f"{prefix}.attn.{part}.{kind}"] = arr
        elif ".attn.proj." in name:
            out[name.replace(".attn.proj.", ".attn.output.")] = value
        elif ".mlp.lin1." in name:
            out[name.replace(".mlp.lin1.", ".mlp.fc1.")] = value
        elif ".mlp.lin2." in name:
            out[name.replace(".mlp.lin2.", ".mlp.fc2.")] = value
        else:
            out[name] = value
    return out
