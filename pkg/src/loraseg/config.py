"""Experiment configuration: schema, validation, YAML IO, parameter counting.

A config file is YAML with up to six sections (backbone, lora, decoder,
loss, train, data). Every field has a default; unknown sections or keys
are errors so typos fail fast. `--set a.b=c` overrides use the same
dotted paths as the schema.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError

PROJECTIONS = ("query", "key", "value", "output")

# SAM's published pixel statistics (inputs in 0..255); override per dataset.
SAM_PIXEL_MEAN = (123.675, 116.28, 103.53)
SAM_PIXEL_STD = (58.395, 57.12, 57.375)


@dataclass
class BackboneSpec:
    image_size: int = 512
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    tap_indices: list = field(default_factory=lambda: [8, 10, 12])
    mlp_ratio: float = 4.0
    pixel_mean: list = field(default_factory=lambda: list(SAM_PIXEL_MEAN))
    pixel_std: list = field(default_factory=lambda: list(SAM_PIXEL_STD))


@dataclass
class LoraSpec:
    rank: int = 4
    lora_alpha: float | None = None  # None -> rank, i.e. scale s = 1
    target_projections: list = field(default_factory=lambda: ["query", "value"])
    enabled: bool = True

    @property
    def scale(self):
        alpha = self.rank if self.lora_alpha is None else self.lora_alpha
        return alpha / self.rank


@dataclass
class DecoderSpec:
    branch_channels: int = 256
    use_bias_prior: bool = True
    foreground_prior: float | None = None  # None -> estimate from training masks


@dataclass
class LossSpec:
    alpha: float = 0.6
    beta: float = 0.4
    gamma: float = 2.5
    epsilon: float = 1e-6
    # "power": loss = (1-TI)^gamma. "inverse": (1-TI)^(1/gamma), the
    # exponent convention of the original focal Tversky formulation.
    exponent_mode: str = "power"


@dataclass
class TrainSpec:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 100
    batch_size: int = 4
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_lr: float = 1e-6
    seed: int = 42
    monitor: str = "val_loss"


@dataclass
class DataSpec:
    name: str = "dataset"
    root: str | None = None
    kind: str = "paired"  # "paired": images/ + masks/; "folded": fold*/images|masks
    manifest: str | None = None
    patch_size: int = 512
    stride: int | None = None  # None -> patch_size (non-overlapping)


@dataclass
class ExperimentConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    lora: LoraSpec = field(default_factory=LoraSpec)
    decoder: DecoderSpec = field(default_factory=DecoderSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    data: DataSpec = field(default_factory=DataSpec)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _check(cond, message):
    if not cond:
        raise ConfigError(message)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    b, lo, d, ls, tr, da = cfg.backbone, cfg.lora, cfg.decoder, cfg.loss, cfg.train, cfg.data

    _check(b.image_size >= 1 and b.patch_size >= 1, "backbone: sizes must be positive")
    _check(
        b.image_size % b.patch_size == 0,
        f"backbone.image_size {b.image_size} not divisible by patch_size {b.patch_size}",
    )
    _check(b.depth >= 1, "backbone.depth must be >= 1")
    _check(b.embed_dim >= 1 and b.num_heads >= 1, "backbone: embed_dim/num_heads must be positive")
    _check(
        b.embed_dim % b.num_heads == 0,
        f"backbone.embed_dim {b.embed_dim} not divisible by num_heads {b.num_heads}",
    )
    _check(b.mlp_ratio > 0, "backbone.mlp_ratio must be > 0")
    _check(len(b.tap_indices) >= 1, "backbone.tap_indices must be nonempty")
    _check(
        all(b.tap_indices[i] < b.tap_indices[i + 1] for i in range(len(b.tap_indices) - 1)),
        "backbone.tap_indices must be strictly increasing",
    )
    for t in b.tap_indices:
        _check(
            isinstance(t, int) and 1 <= t <= b.depth,
            f"tap index out of range: {t} not in [1, {b.depth}]",
        )
    _check(
        len(b.pixel_mean) == 3 and len(b.pixel_std) == 3,
        "backbone.pixel_mean/pixel_std must have 3 channels",
    )
    _check(all(s > 0 for s in b.pixel_std), "backbone.pixel_std entries must be > 0")

    _check(lo.rank >= 1, f"lora.rank must be >= 1, got {lo.rank}")
    _check(
        lo.rank <= b.embed_dim,
        f"lora.rank {lo.rank} exceeds embed_dim {b.embed_dim}",
    )
    if lo.lora_alpha is not None:
        _check(lo.lora_alpha > 0, "lora.lora_alpha must be > 0")
    seen = set()
    for p in lo.target_projections:
        _check(p in PROJECTIONS, f"lora.target_projections: unknown projection '{p}'")
        _check(p not in seen, f"lora.target_projections: duplicate '{p}'")
        seen.add(p)
    if lo.enabled:
        _check(len(lo.target_projections) > 0, "lora.target_projections empty while lora enabled")

    _check(d.branch_channels >= 1, "decoder.branch_channels must be >= 1")
    if d.foreground_prior is not None:
        _check(
            0.0 < d.foreground_prior < 1.0,
            f"decoder.foreground_prior must lie strictly in (0, 1), got {d.foreground_prior}",
        )

    _check(ls.alpha >= 0 and ls.beta >= 0, "loss.alpha/beta must be >= 0")
    _check(ls.gamma > 0, "loss.gamma must be > 0")
    _check(ls.epsilon > 0, "loss.epsilon must be > 0")
    _check(
        ls.exponent_mode in ("power", "inverse"),
        f"loss.exponent_mode must be 'power' or 'inverse', got '{ls.exponent_mode}'",
    )

    _check(tr.learning_rate > 0, "train.learning_rate must be > 0")
    _check(tr.weight_decay >= 0, "train.weight_decay must be >= 0")
    _check(tr.epochs >= 1 and tr.batch_size >= 1, "train.epochs/batch_size must be >= 1")
    _check(0 < tr.plateau_factor < 1, "train.plateau_factor must lie in (0, 1)")
    _check(tr.plateau_patience >= 0, "train.plateau_patience must be >= 0")
    _check(tr.plateau_min_lr >= 0, "train.plateau_min_lr must be >= 0")
    _check(tr.monitor in ("val_loss", "val_dice"), "train.monitor must be val_loss or val_dice")

    _check(da.kind in ("paired", "folded"), f"data.kind must be paired or folded, got '{da.kind}'")
    _check(da.patch_size >= 1, "data.patch_size must be >= 1")
    if da.stride is not None:
        _check(da.stride >= 1, "data.stride must be >= 1")
    return cfg


def _coerce(section, name, ftype, value):
    if ftype in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{name}: expected integer, got {value!r}")
        return value
    if ftype in ("float", float, "float | None"):
        if value is None and "None" in str(ftype):
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{name}: expected number, got {value!r}")
        return float(value)
    if ftype in ("bool", bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{name}: expected boolean, got {value!r}")
        return value
    if ftype in ("str", str):
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{name}: expected string, got {value!r}")
        return value
    if ftype == "str | None":
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{section}.{name}: expected string or null, got {value!r}")
        return value
    if ftype in ("list", list):
        if not isinstance(value, list):
            raise ConfigError(f"{section}.{name}: expected list, got {value!r}")
        return list(value)
    if ftype == "int | None":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{name}: expected integer or null, got {value!r}")
        return value
    raise ConfigError(f"{section}.{name}: unsupported field type {ftype!r}")


def _section_from_dict(section_name, cls, data):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section_name}' must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown key '{section_name}.{key}'")
        kwargs[key] = _coerce(section_name, key, fields[key].type, value)
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    for key in data:
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section '{key}'")
    cfg = ExperimentConfig(
        backbone=_section_from_dict("backbone", BackboneSpec, data.get("backbone")),
        lora=_section_from_dict("lora", LoraSpec, data.get("lora")),
        decoder=_section_from_dict("decoder", DecoderSpec, data.get("decoder")),
        loss=_section_from_dict("loss", LossSpec, data.get("loss")),
        train=_section_from_dict("train", TrainSpec, data.get("train")),
        data=_section_from_dict("data", DataSpec, data.get("data")),
    )
    return validate_config(cfg)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply dotted-path overrides like ('lora.rank', '8'); values are YAML scalars."""
    data = config_to_dict(cfg)
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override '{item}' must look like section.key=value")
            path, _, raw_value = item.partition("=")
        else:
            path, raw_value = item
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override path '{path}' must be section.key")
        section, key = parts
        if section not in data:
            raise ConfigError(f"unknown section '{section}'")
        if key not in data[section]:
            raise ConfigError(f"unknown key '{section}.{key}'")
        try:
            value = yaml.safe_load(raw_value) if isinstance(raw_value, str) else raw_value
        except yaml.YAMLError as e:
            raise ConfigError(f"override '{path}': cannot parse value {raw_value!r}: {e}") from e
        data = copy.deepcopy(data)
        data[section][key] = value
    return config_from_dict(data)


def count_trainable_params(cfg: ExperimentConfig) -> dict:
    """Analytic trainable-parameter budget {lora, decoder, total}.

    Must equal the exact optimizer-visible count of the instantiated model:
      lora     = depth * |targets| * 2 * embed_dim * rank
      branch   = (C*dim + C)            1x1 input projection (with bias)
               + 2 * 9 * C^2            two 3x3 convs (bias-free, BN follows)
               + 2 * 2C                 batch-norm affine pairs
      decoder  = n_taps * branch + (n_taps * C + 1) fusion head
    """
    validate_config(cfg)
    b, lo, d = cfg.backbone, cfg.lora, cfg.decoder
    if lo.enabled:
        lora = b.depth * len(lo.target_projections) * 2 * b.embed_dim * lo.rank
    else:
        lora = 0
    c = d.branch_channels
    branch = (c * b.embed_dim + c) + 2 * (9 * c * c) + 2 * (2 * c)
    n_taps = len(b.tap_indices)
    decoder = n_taps * branch + (n_taps * c + 1)
    return {"lora": lora, "decoder": decoder, "total": lora + decoder}


def _canonical_yaml(data) -> bytes:
    return yaml.safe_dump(data, sort_keys=True).encode("utf-8")


def config_digest(cfg: ExperimentConfig) -> str:
    """Digest over the full configuration."""
    return hashlib.sha256(_canonical_yaml(config_to_dict(cfg))).hexdigest()


def model_digest(cfg: ExperimentConfig) -> str:
    """Digest over the model-defining sections only (backbone, lora, decoder).

    Checkpoints store this one, so evaluating a TNBC-trained checkpoint on
    MoNuSeg (different data section) stays compatible while a rank change
    does not.
    """
    data = config_to_dict(cfg)
    subset = {k: data[k] for k in ("backbone", "lora", "decoder")}
    return hashlib.sha256(_canonical_yaml(subset)).hexdigest()


def toy_config(**overrides) -> ExperimentConfig:
    """Small CPU-friendly config used by tests and example runs."""
    data = {
        "backbone": {
            "image_size": 64,
            "patch_size": 8,
            "embed_dim": 32,
            "depth": 4,
            "num_heads": 4,
            "tap_indices": [2, 3, 4],
            "pixel_mean": [127.5, 127.5, 127.5],
            "pixel_std": [60.0, 60.0, 60.0],
        },
        "lora": {"rank": 2},
        "decoder": {"branch_channels": 32},
        "train": {
            "learning_rate": 3e-3,
            "epochs": 15,
            "batch_size": 4,
            "plateau_patience": 3,
        },
        "data": {"patch_size": 64},
    }
    for path, value in overrides.items():
        section, key = path.split(".")
        data.setdefault(section, {})[key] = value
    return config_from_dict(data)
