"""Optimization loop over adapter + decoder parameters.

AdamW over the trainable set only, ReduceLROnPlateau on the monitored
validation quantity, per-epoch CSV logging, and joint adapter+decoder
checkpoints that never contain frozen encoder tensors. Training is
deterministic given the config seed: weight init, data order (derived
per-epoch permutations), and blob generation all flow from it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.optim.lr_scheduler import ReduceLROnPlateau

from . import metrics
from .archive import load_archive, save_archive
from .config import config_from_dict, config_to_dict, model_digest
from .data import build_manifest, estimate_foreground_prior, extract_patches, load_manifest
from .errors import CheckpointError, ConfigError, DataError, TrainingDiverged
from .model import build_model, trainable_parameters
from .objective import focal_tversky

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,train_loss,val_loss,val_dice,lr"


@dataclass
class TrainState:
    epoch: int = 0
    best_value: float | None = None
    current_lr: float = 0.0
    seed: int = 0
    last_train_loss: float | None = None
    best_checkpoint: str = ""
    last_checkpoint: str = ""


@dataclass
class TrainResult:
    best_checkpoint: Path
    last_checkpoint: Path
    log_path: Path
    best_value: float
    epochs_run: int
    history: list


def build_optimizer(model, spec):
    params = trainable_parameters(model)
    if not params:
        raise ConfigError("model has no trainable parameters to optimize")
    return torch.optim.AdamW(params, lr=spec.learning_rate, weight_decay=spec.weight_decay)


def resolve_manifest(data_spec, seed):
    if data_spec.manifest:
        return load_manifest(data_spec.manifest)
    if data_spec.root:
        return build_manifest(data_spec.root, kind=data_spec.kind, seed=seed)
    raise DataError("config.data must set either 'manifest' or 'root'")


def iterate_batches(patches, order, batch_size):
    for i in range(0, len(order), batch_size):
        chunk = [patches[j] for j in order[i : i + batch_size]]
        images = torch.stack([p.image for p in chunk])
        targets = torch.stack([p.mask for p in chunk]).unsqueeze(1).float()
        yield images, targets


def epoch_order(seed, epoch, n):
    """Deterministic shuffle for one epoch, independent of ambient RNG state."""
    return np.random.default_rng(seed * 1_000_003 + epoch).permutation(n)


def validate(model, patches, loss_spec, batch_size, device="cpu"):
    """Mean validation loss and mean per-patch Dice at threshold 0.5."""
    model.eval()
    losses, dices = [], []
    with torch.no_grad():
        for images, targets in iterate_batches(patches, np.arange(len(patches)), batch_size):
            probs = model(images.to(device))
            losses.append(float(focal_tversky(probs, targets.to(device), loss_spec)))
            binary = (probs >= 0.5).cpu().numpy().astype(np.uint8)
            truth = targets.cpu().numpy().astype(np.uint8)
            for b in range(binary.shape[0]):
                dices.append(metrics.dice(binary[b, 0], truth[b, 0]))
    return sum(losses) / len(losses), sum(dices) / len(dices)


def _monitored(monitor, val_loss, val_dice):
    return val_loss if monitor == "val_loss" else val_dice


def _improved(monitor, value, best):
    if best is None:
        return True
    return value < best if monitor == "val_loss" else value > best


def save_checkpoint(path, model, optimizer, scheduler, config, state):
    """Archive trainable params, decoder buffers, optimizer/scheduler/RNG state.

    Frozen encoder tensors are never written; the loader rebuilds them from
    the config seed.
    """
    tensors = {}
    for name, p in model.named_parameters():
        if p.requires_grad:
            tensors[f"model/{name}"] = p.detach().cpu().numpy()
    for name, buf in model.named_buffers():
        if name.startswith("head."):
            tensors[f"model/{name}"] = buf.detach().cpu().numpy()
    opt_state = optimizer.state_dict()
    for idx, entry in opt_state["state"].items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                tensors[f"optim/{idx}/{key}"] = value.detach().cpu().numpy()
    tensors["rng/torch_cpu"] = torch.get_rng_state().numpy()
    meta = {
        "config": config_to_dict(config),
        "model_digest": model_digest(config),
        "monitor": config.train.monitor,
        "epoch": state.epoch,
        "best_value": state.best_value,
        "current_lr": state.current_lr,
        "last_train_loss": state.last_train_loss,
        "foreground_prior": getattr(model, "foreground_prior", None),
        "optim_param_groups": json.loads(json.dumps(opt_state["param_groups"])),
        "scheduler": scheduler.state_dict() if scheduler is not None else None,
    }
    save_archive(path, tensors, component="checkpoint", meta=meta)
    return path


def _model_tensor_names(model):
    names = [f"model/{n}" for n, p in model.named_parameters() if p.requires_grad]
    names += [f"model/{n}" for n, _ in model.named_buffers() if n.startswith("head.")]
    return names


def _load_model_tensors(model, tensors):
    expected = set(_model_tensor_names(model))
    present = {k for k in tensors if k.startswith("model/")}
    unknown = present - expected
    if unknown:
        raise CheckpointError(f"checkpoint carries unexpected tensors: {sorted(unknown)}")
    missing = expected - present
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    lookup = dict(model.named_parameters())
    lookup.update(dict(model.named_buffers()))
    with torch.no_grad():
        for key in sorted(present):
            name = key[len("model/") :]
            dst = lookup[name]
            src = torch.as_tensor(tensors[key])
            if tuple(src.shape) != tuple(dst.shape):
                raise CheckpointError(
                    f"shape mismatch for '{name}': {tuple(src.shape)} vs {tuple(dst.shape)}"
                )
            dst.copy_(src.to(dst.dtype))


def load_checkpoint(path, expected_config=None, device="cpu"):
    """Rebuild the model a checkpoint was trained with and restore its state.

    Returns (model, archive). The frozen encoder is reconstructed from the
    embedded config + seed, so restored outputs are bit-identical.
    """
    archive = load_archive(path)
    if archive.component != "checkpoint":
        raise CheckpointError(f"{path}: expected a checkpoint archive, got '{archive.component}'")
    config = config_from_dict(archive.meta["config"])
    if expected_config is not None and model_digest(expected_config) != archive.meta["model_digest"]:
        raise CheckpointError(
            "checkpoint model digest mismatch: the checkpoint was produced by an "
            "incompatible backbone/lora/decoder configuration"
        )
    model = build_model(
        config,
        foreground_prior=archive.meta.get("foreground_prior"),
        seed=config.train.seed,
    ).to(device)
    model.foreground_prior = archive.meta.get("foreground_prior")
    _load_model_tensors(model, archive.tensors)
    model.eval()
    return model, archive


def _restore_optimizer(optimizer, archive):
    groups = archive.meta["optim_param_groups"]
    state = {}
    for key, arr in archive.tensors.items():
        if not key.startswith("optim/"):
            continue
        _, idx, field_name = key.split("/", 2)
        state.setdefault(int(idx), {})[field_name] = torch.as_tensor(arr)
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def train(config, out_dir, device="cpu", resume=None):
    """Run the full optimization loop; returns paths and per-epoch history."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"
    log_path = out_dir / "train_log.csv"

    seed = config.train.seed
    torch.manual_seed(seed)

    manifest = resolve_manifest(config.data, seed)
    mean, std = config.backbone.pixel_mean, config.backbone.pixel_std
    patch, stride = config.data.patch_size, config.data.stride
    train_patches = extract_patches(manifest, patch, stride, "train", mean, std)
    val_patches = extract_patches(manifest, patch, stride, "val", mean, std)
    if not train_patches:
        raise DataError("training split produced no patches")
    if not val_patches:
        raise DataError("validation split produced no patches")

    if config.decoder.foreground_prior is not None:
        prior = config.decoder.foreground_prior
    else:
        prior = estimate_foreground_prior(train_patches)

    model = build_model(config, foreground_prior=prior, seed=seed).to(device)
    model.foreground_prior = prior
    optimizer = build_optimizer(model, config.train)
    scheduler = ReduceLROnPlateau(
        optimizer,
        mode="min" if config.train.monitor == "val_loss" else "max",
        factor=config.train.plateau_factor,
        patience=config.train.plateau_patience,
        min_lr=config.train.plateau_min_lr,
    )

    state = TrainState(seed=seed, current_lr=config.train.learning_rate)
    start_epoch = 1
    if resume is not None:
        archive = load_archive(resume)
        if archive.meta["model_digest"] != model_digest(config):
            raise CheckpointError("resume checkpoint is incompatible with this config")
        _load_model_tensors(model, archive.tensors)
        _restore_optimizer(optimizer, archive)
        scheduler.load_state_dict(archive.meta["scheduler"])
        torch.set_rng_state(torch.as_tensor(archive.tensors["rng/torch_cpu"]))
        state.epoch = archive.meta["epoch"]
        state.best_value = archive.meta["best_value"]
        start_epoch = state.epoch + 1

    if not log_path.exists():
        log_path.write_text(LOG_HEADER + "\n", encoding="utf-8")

    history = []
    for epoch in range(start_epoch, config.train.epochs + 1):
        model.train()
        order = epoch_order(seed, epoch, len(train_patches))
        epoch_losses = []
        for step, (images, targets) in enumerate(
            iterate_batches(train_patches, order, config.train.batch_size)
        ):
            probs = model(images.to(device))
            loss = focal_tversky(probs, targets.to(device), config.loss)
            if not torch.isfinite(loss):
                state.epoch = epoch
                dump = out_dir / "diverged.ckpt"
                save_checkpoint(dump, model, optimizer, scheduler, config, state)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}; state dumped to {dump}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())

        train_loss = sum(epoch_losses) / len(epoch_losses)
        val_loss, val_dice = validate(
            model, val_patches, config.loss, config.train.batch_size, device
        )
        lr_now = optimizer.param_groups[0]["lr"]

        row = {
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "val_dice": val_dice,
            "lr": lr_now,
        }
        history.append(row)
        with open(log_path, "a", encoding="utf-8") as f:
            f.write(
                f"{epoch},{train_loss:.6f},{val_loss:.6f},{val_dice:.6f},{lr_now:.8g}\n"
            )
        log.info(
            "epoch %d: train %.4f val %.4f dice %.4f lr %.2g",
            epoch, train_loss, val_loss, val_dice, lr_now,
        )

        state.epoch = epoch
        state.current_lr = lr_now
        state.last_train_loss = train_loss
        monitored = _monitored(config.train.monitor, val_loss, val_dice)
        if _improved(config.train.monitor, monitored, state.best_value):
            state.best_value = monitored
            save_checkpoint(best_path, model, optimizer, scheduler, config, state)
            state.best_checkpoint = str(best_path)
        scheduler.step(monitored)
        save_checkpoint(last_path, model, optimizer, scheduler, config, state)
        state.last_checkpoint = str(last_path)

    return TrainResult(
        best_checkpoint=best_path,
        last_checkpoint=last_path,
        log_path=log_path,
        best_value=state.best_value,
        epochs_run=state.epoch,
        history=history,
    )
