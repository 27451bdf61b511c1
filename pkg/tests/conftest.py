import numpy as np
import pytest
import torch

from loraseg.config import config_from_dict, toy_config
from loraseg.data import extract_patches, synth_blobs
from loraseg.model import build_model
from loraseg.objective import focal_tversky
from loraseg.trainer import (
    TrainState,
    build_optimizer,
    save_checkpoint,
    train,
)


def tiny_config(root=None, **overrides):
    """Even smaller than toy: used where many runs are needed (protocol tests)."""
    data = {
        "backbone": {
            "image_size": 48,
            "patch_size": 8,
            "embed_dim": 16,
            "depth": 4,
            "num_heads": 2,
            "tap_indices": [2, 3, 4],
            "pixel_mean": [127.5, 127.5, 127.5],
            "pixel_std": [60.0, 60.0, 60.0],
        },
        "lora": {"rank": 2},
        "decoder": {"branch_channels": 16},
        "train": {"learning_rate": 1e-2, "epochs": 10, "batch_size": 4},
        "data": {"patch_size": 48},
    }
    if root is not None:
        data["data"]["root"] = str(root)
    for path, value in overrides.items():
        section, key = path.split(".")
        data.setdefault(section, {})[key] = value
    return config_from_dict(data)


@pytest.fixture(scope="session")
def blob_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("blobs") / "blobs20"
    synth_blobs(root, 20, image_size=64, seed=7)
    return root


@pytest.fixture
def toy_cfg(blob_root):
    return toy_config(**{"data.root": str(blob_root)})


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory, blob_root):
    """One full 15-epoch toy training run, shared across test modules."""
    import time

    cfg = toy_config(**{"data.root": str(blob_root)})
    out = tmp_path_factory.mktemp("toyrun")
    started = time.monotonic()
    result = train(cfg, out)
    result.elapsed_seconds = time.monotonic() - started
    return cfg, result


@pytest.fixture(scope="session")
def overfit_ctx(tmp_path_factory):
    """200 optimizer steps on a single small batch, checkpointed for reuse."""
    root = tmp_path_factory.mktemp("overfit") / "blobs5"
    synth_blobs(root, 5, image_size=64, seed=11)
    cfg = toy_config(**{"data.root": str(root), "train.batch_size": 4})
    torch.manual_seed(cfg.train.seed)
    from loraseg.data import build_manifest, save_manifest

    manifest = build_manifest(root, seed=cfg.train.seed)
    patches = extract_patches(
        manifest, cfg.data.patch_size, None, "train",
        cfg.backbone.pixel_mean, cfg.backbone.pixel_std,
    )
    images = torch.stack([p.image for p in patches])
    targets = torch.stack([p.mask for p in patches]).unsqueeze(1).float()

    model = build_model(cfg, foreground_prior=0.15, seed=cfg.train.seed)
    model.foreground_prior = 0.15
    optimizer = build_optimizer(model, cfg.train)
    losses = []
    for _ in range(200):
        probs = model(images)
        loss = focal_tversky(probs, targets, cfg.loss)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(loss.item())

    from torch.optim.lr_scheduler import ReduceLROnPlateau

    scheduler = ReduceLROnPlateau(optimizer)
    ckpt = tmp_path_factory.mktemp("overfit_ckpt") / "overfit.ckpt"
    save_checkpoint(
        ckpt, model, optimizer, scheduler, cfg,
        TrainState(epoch=1, best_value=losses[-1], seed=cfg.train.seed),
    )
    manifest_path = root / "manifest.yaml"
    save_manifest(manifest, manifest_path)
    return {
        "config": cfg,
        "model": model,
        "losses": losses,
        "checkpoint": ckpt,
        "manifest": manifest_path,
        "images": images,
        "targets": targets,
    }


@pytest.fixture(scope="session")
def proto_datasets(tmp_path_factory):
    """Two small blob datasets with different texture, for transfer protocol."""
    base = tmp_path_factory.mktemp("proto")
    root_a = base / "blobsA"
    root_b = base / "blobsB"
    synth_blobs(root_a, 12, image_size=48, seed=21, name="blobsA", noise=6.0)
    synth_blobs(root_b, 12, image_size=48, seed=22, name="blobsB", noise=14.0,
                fg_band=(0.10, 0.35))
    return {"blobsA": root_a, "blobsB": root_b}


@pytest.fixture(scope="session")
def proto_checkpoints(tmp_path_factory, proto_datasets):
    """A 3-epoch tiny checkpoint per protocol dataset."""
    out = tmp_path_factory.mktemp("proto_runs")
    ckpts = {}
    for name, root in proto_datasets.items():
        cfg = tiny_config(root=root)
        result = train(cfg, out / name)
        ckpts[name] = result.best_checkpoint
    return ckpts


@pytest.fixture(autouse=True)
def _deterministic_seed():
    torch.manual_seed(0)
    np.random.seed(0)
