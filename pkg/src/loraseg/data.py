"""Dataset manifests, deterministic splits, patch extraction, synthetic blobs.

On-disk conventions:
  paired  root/images/*.png|.tif...  +  root/masks/<same stem>.png
  folded  root/<fold>/images/*      +  root/<fold>/masks/*   (fold = dir name)
Masks are single-channel with 0 = background and any nonzero label =
foreground; binarization is (label > 0). A manifest is a YAML file living
in the dataset root; sample paths inside are relative to that root.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .errors import DataError

MANIFEST_VERSION = 1
IMAGE_EXTENSIONS = (".png", ".tif", ".tiff", ".jpg", ".jpeg", ".bmp")
SPLITS = ("train", "val", "test")
PRIOR_CLAMP = 1e-4


@dataclass
class Sample:
    sample_id: str
    image: str  # path relative to the manifest root
    mask: str
    tag: str = ""  # fold tag for folded datasets, "" otherwise
    split: str = "train"


@dataclass
class DatasetManifest:
    name: str
    root: str
    samples: list = field(default_factory=list)

    def of_split(self, split):
        return [s for s in self.samples if s.split == split]

    def image_path(self, sample) -> Path:
        return Path(self.root) / sample.image

    def mask_path(self, sample) -> Path:
        return Path(self.root) / sample.mask


def manifest_digest(manifest) -> str:
    content = {
        "name": manifest.name,
        "samples": [
            {
                "id": s.sample_id,
                "image": s.image,
                "mask": s.mask,
                "tag": s.tag,
                "split": s.split,
            }
            for s in manifest.samples
        ],
    }
    raw = yaml.safe_dump(content, sort_keys=True).encode("utf-8")
    return hashlib.sha256(raw).hexdigest()


def save_manifest(manifest, path):
    path = Path(path)
    content = {
        "version": MANIFEST_VERSION,
        "name": manifest.name,
        "samples": [
            {
                "id": s.sample_id,
                "image": s.image,
                "mask": s.mask,
                "tag": s.tag,
                "split": s.split,
            }
            for s in manifest.samples
        ],
        "digest": manifest_digest(manifest),
    }
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(content, f, sort_keys=False)
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            content = yaml.safe_load(f)
    except (OSError, yaml.YAMLError) as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    if not isinstance(content, dict) or content.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: not a version-{MANIFEST_VERSION} manifest")
    manifest = DatasetManifest(
        name=content["name"],
        root=str(path.parent),
        samples=[
            Sample(
                sample_id=s["id"],
                image=s["image"],
                mask=s["mask"],
                tag=s.get("tag", ""),
                split=s["split"],
            )
            for s in content["samples"]
        ],
    )
    if manifest_digest(manifest) != content.get("digest"):
        raise DataError(f"{path}: manifest digest mismatch (file edited or corrupt)")
    for s in manifest.samples:
        if s.split not in SPLITS:
            raise DataError(f"{path}: sample '{s.sample_id}' has unknown split '{s.split}'")
    return manifest


def split_counts(n, ratios=(0.8, 0.1, 0.1)):
    """Counts (train, val, test) within +-1 sample of the requested ratios."""
    n_val = int(n * ratios[1] + 0.5)
    n_test = int(n * ratios[2] + 0.5)
    n_train = n - n_val - n_test
    if n_train < 0:
        raise DataError(f"cannot split {n} samples with ratios {ratios}")
    return n_train, n_val, n_test


def _discover_pairs(images_dir, masks_dir, prefix=""):
    if not images_dir.is_dir():
        raise DataError(f"missing images directory: {images_dir}")
    if not masks_dir.is_dir():
        raise DataError(f"missing masks directory: {masks_dir}")
    masks_by_stem = {}
    for p in masks_dir.iterdir():
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            masks_by_stem[p.stem] = p
    pairs = []
    for p in sorted(images_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        if p.stem not in masks_by_stem:
            raise DataError(f"no mask found for image stem '{p.stem}'")
        pairs.append((prefix + p.stem, p, masks_by_stem[p.stem]))
    return pairs


def build_manifest(root, kind="paired", seed=42, name=None, ratios=(0.8, 0.1, 0.1)):
    """Scan a dataset tree and assign deterministic source-image-level splits.

    All patches later cut from one image inherit its split, so there is no
    train/test leakage. For `folded` datasets the split is a default fold
    rotation; use `fold_plan` + `apply_fold_assignment` for the full
    three-experiment protocol.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root does not exist: {root}")
    name = name or root.name

    if kind == "paired":
        pairs = _discover_pairs(root / "images", root / "masks")
        tags = {sid: "" for sid, _, _ in pairs}
    elif kind == "folded":
        fold_dirs = sorted(p for p in root.iterdir() if p.is_dir())
        if not fold_dirs:
            raise DataError(f"no fold directories under {root}")
        pairs = []
        tags = {}
        for fold_dir in fold_dirs:
            fold_pairs = _discover_pairs(
                fold_dir / "images", fold_dir / "masks", prefix=f"{fold_dir.name}/"
            )
            pairs.extend(fold_pairs)
            for sid, _, _ in fold_pairs:
                tags[sid] = fold_dir.name
    else:
        raise DataError(f"unknown dataset kind '{kind}'")

    if not pairs:
        raise DataError(f"no image/mask pairs found under {root}")

    samples = [
        Sample(
            sample_id=sid,
            image=str(img.relative_to(root)),
            mask=str(msk.relative_to(root)),
            tag=tags[sid],
        )
        for sid, img, msk in pairs
    ]

    if kind == "folded":
        folds = sorted({s.tag for s in samples})
        if len(folds) != 3:
            raise DataError(f"folded dataset needs exactly 3 folds, found {folds}")
        assignment = fold_plan(folds)[0]
        manifest = DatasetManifest(name=name, root=str(root), samples=samples)
        return apply_fold_assignment(manifest, assignment)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_train, n_val, _ = split_counts(len(samples), ratios)
    for rank, idx in enumerate(order):
        if rank < n_train:
            samples[idx].split = "train"
        elif rank < n_train + n_val:
            samples[idx].split = "val"
        else:
            samples[idx].split = "test"
    return DatasetManifest(name=name, root=str(root), samples=samples)


def fold_plan(folds):
    """Three experiments rotating each fold through train/val/test once."""
    folds = list(folds)
    if len(folds) != 3:
        raise DataError(f"fold plan needs exactly 3 folds, got {folds}")
    return [
        {"train": folds[i % 3], "val": folds[(i + 1) % 3], "test": folds[(i + 2) % 3]}
        for i in range(3)
    ]


def apply_fold_assignment(manifest, assignment):
    role_of = {fold: role for role, fold in assignment.items()}
    samples = []
    for s in manifest.samples:
        if s.tag not in role_of:
            raise DataError(f"sample '{s.sample_id}' has fold tag '{s.tag}' outside the plan")
        samples.append(replace(s, split=role_of[s.tag]))
    return replace(manifest, samples=samples)


def load_image(path) -> np.ndarray:
    """RGB uint8 array (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise DataError(f"unreadable image {path}: {e}") from e


def load_mask(path) -> np.ndarray:
    """Binary uint8 array (H, W); any nonzero source label counts as foreground."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as e:
        raise DataError(f"unreadable mask {path}: {e}") from e
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return (arr > 0).astype(np.uint8)


def normalize_image(image, mean, std) -> torch.Tensor:
    """(H, W, 3) uint8 -> normalized float32 (3, H, W)."""
    x = torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)
    mean = torch.tensor(mean, dtype=torch.float32).view(3, 1, 1)
    std = torch.tensor(std, dtype=torch.float32).view(3, 1, 1)
    return (x - mean) / std


def pad_to_cover(array, patch_size, stride):
    """Mirror-pad (symmetric) the first two axes so tiles cover everything."""
    h, w = array.shape[:2]

    def padded(extent):
        if extent <= patch_size:
            return patch_size
        tiles = -(-(extent - patch_size) // stride)  # ceil division
        return tiles * stride + patch_size

    pad_h, pad_w = padded(h) - h, padded(w) - w
    if pad_h == 0 and pad_w == 0:
        return array
    widths = ((0, pad_h), (0, pad_w)) + ((0, 0),) * (array.ndim - 2)
    return np.pad(array, widths, mode="symmetric")


def tile_origins(height, width, patch_size, stride):
    rows = range(0, max(height - patch_size, 0) + 1, stride)
    cols = range(0, max(width - patch_size, 0) + 1, stride)
    return [(r, c) for r in rows for c in cols]


@dataclass
class PatchRecord:
    sample_id: str
    origin: tuple  # (row, col) in the padded source image
    image: torch.Tensor  # normalized float32 (3, P, P)
    mask: torch.Tensor  # uint8 (P, P) in {0, 1}
    source_size: tuple = (0, 0)  # original (H, W) before padding


def extract_patches(manifest, patch_size=512, stride=None, split=None, mean=None, std=None):
    """Cut every (or one split's) sample into normalized patch records.

    Tiling starts at (0, 0) with the given stride (default: non-overlapping);
    right/bottom remainders are covered by mirror-padding the source to full
    tiles.
    """
    stride = stride or patch_size
    mean = mean if mean is not None else (0.0, 0.0, 0.0)
    std = std if std is not None else (1.0, 1.0, 1.0)
    records = []
    samples = manifest.samples if split is None else manifest.of_split(split)
    for sample in samples:
        image = load_image(manifest.image_path(sample))
        mask = load_mask(manifest.mask_path(sample))
        if image.shape[:2] != mask.shape:
            raise DataError(
                f"sample '{sample.sample_id}': image {image.shape[:2]} vs mask {mask.shape}"
            )
        h, w = image.shape[:2]
        if h * 4 < patch_size or w * 4 < patch_size:
            raise DataError(
                f"sample '{sample.sample_id}' ({h}x{w}) smaller than a quarter patch "
                f"({patch_size})"
            )
        image = pad_to_cover(image, patch_size, stride)
        mask = pad_to_cover(mask, patch_size, stride)
        for r, c in tile_origins(image.shape[0], image.shape[1], patch_size, stride):
            records.append(
                PatchRecord(
                    sample_id=sample.sample_id,
                    origin=(r, c),
                    image=normalize_image(
                        image[r : r + patch_size, c : c + patch_size], mean, std
                    ),
                    mask=torch.from_numpy(
                        mask[r : r + patch_size, c : c + patch_size].copy()
                    ),
                    source_size=(h, w),
                )
            )
    return records


def estimate_foreground_prior(patches) -> float:
    """Foreground pixel fraction over training patches, clamped away from {0, 1}."""
    if not patches:
        raise DataError("cannot estimate foreground prior from an empty patch set")
    foreground = sum(int(p.mask.sum()) for p in patches)
    total = sum(p.mask.numel() for p in patches)
    return min(max(foreground / total, PRIOR_CLAMP), 1.0 - PRIOR_CLAMP)


def _render_blobs(rng, image_size, n_blob_range, fg_band, noise, max_tries=64):
    """One synthetic sample: ellipse-union mask + stained-tissue-like image."""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    for _ in range(max_tries):
        mask = np.zeros((image_size, image_size), dtype=bool)
        k = int(rng.integers(n_blob_range[0], n_blob_range[1] + 1))
        for _ in range(k):
            cy, cx = rng.uniform(0.15, 0.85, size=2) * image_size
            a = rng.uniform(0.09, 0.22) * image_size
            b = rng.uniform(0.09, 0.22) * image_size
            theta = rng.uniform(0.0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
            v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
            mask |= u * u + v * v <= 1.0
        ratio = mask.mean()
        if fg_band[0] <= ratio <= fg_band[1]:
            break
    image = np.empty((image_size, image_size, 3), dtype=np.float64)
    background = np.array([228.0, 205.0, 216.0]) + rng.normal(0, 4, size=3)
    foreground = np.array([118.0, 88.0, 158.0]) + rng.normal(0, 8, size=3)
    image[:] = background
    image[mask] = foreground
    image += rng.normal(0.0, noise, size=image.shape)
    return np.clip(image, 0, 255).astype(np.uint8), mask.astype(np.uint8)


def synth_blobs(
    out_dir,
    n_samples,
    image_size=64,
    seed=7,
    name="blobs",
    noise=8.0,
    fg_band=(0.05, 0.30),
    n_blob_range=(2, 4),
    ratios=(0.8, 0.1, 0.1),
):
    """Generate an ellipse-blob dataset on disk and return its manifest.

    Deterministic given the seed: regenerating into a fresh directory yields
    byte-identical files.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_samples):
        image, mask = _render_blobs(rng, image_size, n_blob_range, fg_band, noise)
        stem = f"{name}_{i:03d}"
        Image.fromarray(image).save(out_dir / "images" / f"{stem}.png")
        Image.fromarray(mask * 255).save(out_dir / "masks" / f"{stem}.png")
    manifest = build_manifest(out_dir, kind="paired", seed=seed, name=name, ratios=ratios)
    save_manifest(manifest, out_dir / "manifest.yaml")
    return manifest


def materialize_patches(manifest, out_dir, patch_size=512, stride=None):
    """Write patch PNGs + a patch-level manifest (split inherited per source)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    stride = stride or patch_size
    samples = []
    split_of = {s.sample_id: s.split for s in manifest.samples}
    tag_of = {s.sample_id: s.tag for s in manifest.samples}
    records = extract_patches(manifest, patch_size=patch_size, stride=stride)
    for rec in records:
        r, c = rec.origin
        stem = f"{rec.sample_id.replace('/', '_')}__r{r}_c{c}"
        image = rec.image.permute(1, 2, 0).numpy().astype(np.uint8)  # unnormalized extract
        Image.fromarray(image).save(out_dir / "images" / f"{stem}.png")
        Image.fromarray(rec.mask.numpy() * 255).save(out_dir / "masks" / f"{stem}.png")
        samples.append(
            Sample(
                sample_id=stem,
                image=f"images/{stem}.png",
                mask=f"masks/{stem}.png",
                tag=tag_of[rec.sample_id],
                split=split_of[rec.sample_id],
            )
        )
    patched = DatasetManifest(name=f"{manifest.name}-patches", root=str(out_dir), samples=samples)
    save_manifest(patched, out_dir / "manifest.yaml")
    return patched
