"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config or
validation error. Logs go to stderr; stdout carries one machine-readable
JSON summary per successful invocation; artifacts land under --out.
LORASEG_CHECKPOINT_DIR / LORASEG_CACHE_DIR supply default output
directories for `train` and `prepare-data` when --out is omitted.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import data as data_mod
from . import evaluator, trainer
from .config import (
    apply_overrides,
    config_from_dict,
    count_trainable_params,
    load_config,
    save_config,
)
from .errors import ConfigError, LorasegError


def _load(config_path, overrides):
    cfg = load_config(config_path) if config_path else config_from_dict({})
    if overrides:
        cfg = apply_overrides(cfg, list(overrides))
    return cfg


def _emit(summary):
    click.echo(json.dumps(summary, sort_keys=True))


ENV_CHECKPOINT_DIR = "LORASEG_CHECKPOINT_DIR"
ENV_CACHE_DIR = "LORASEG_CACHE_DIR"

config_option = click.option("--config", "config_path", type=click.Path(exists=True),
                             default=None, help="Experiment config (YAML).")
set_option = click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE",
                          help="Dotted-path config override; repeatable.")
out_option = click.option("--out", "out_dir", required=True, type=click.Path(),
                          help="Output directory for artifacts.")


def _out_or_env(out_dir, env_var):
    out_dir = out_dir or os.environ.get(env_var)
    if not out_dir:
        raise click.UsageError(f"--out is required (or set ${env_var})")
    return out_dir


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Debug-level logging.")
def cli(verbose):
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


@cli.command()
@click.option("--n", "n_samples", default=20, show_default=True, help="Number of images.")
@click.option("--image-size", default=64, show_default=True)
@click.option("--seed", default=7, show_default=True)
@click.option("--name", default="blobs", show_default=True)
@click.option("--noise", default=8.0, show_default=True)
@out_option
def synth(n_samples, image_size, seed, name, noise, out_dir):
    """Generate a synthetic ellipse-blob dataset with exact masks."""
    manifest = data_mod.synth_blobs(
        out_dir, n_samples, image_size=image_size, seed=seed, name=name, noise=noise
    )
    _emit(
        {
            "command": "synth",
            "manifest": str(Path(out_dir) / "manifest.yaml"),
            "samples": len(manifest.samples),
            "digest": data_mod.manifest_digest(manifest),
        }
    )


@cli.command("prepare-data")
@config_option
@set_option
@click.option("--root", default=None, type=click.Path(exists=True),
              help="Dataset root (overrides config.data.root).")
@click.option("--kind", default=None, type=click.Choice(["paired", "folded"]))
@click.option("--out", "out_dir", default=None, type=click.Path(),
              help=f"Patch cache directory (default: ${ENV_CACHE_DIR}).")
def prepare_data(config_path, overrides, root, kind, out_dir):
    """Build a manifest and materialize patches for a dataset tree."""
    out_dir = _out_or_env(out_dir, ENV_CACHE_DIR)
    cfg = _load(config_path, overrides)
    root = root or cfg.data.root
    if not root:
        raise ConfigError("prepare-data needs --root or config.data.root")
    manifest = data_mod.build_manifest(
        root, kind=kind or cfg.data.kind, seed=cfg.train.seed, name=cfg.data.name
    )
    data_mod.save_manifest(manifest, Path(root) / "manifest.yaml")
    patched = data_mod.materialize_patches(
        manifest, out_dir, patch_size=cfg.data.patch_size, stride=cfg.data.stride
    )
    _emit(
        {
            "command": "prepare-data",
            "manifest": str(Path(out_dir) / "manifest.yaml"),
            "patches": len(patched.samples),
        }
    )


@cli.command()
@config_option
@set_option
@click.option("--out", "out_dir", default=None, type=click.Path(),
              help=f"Run directory (default: ${ENV_CHECKPOINT_DIR}).")
@click.option("--resume", default=None, type=click.Path(exists=True),
              help="Checkpoint to resume from.")
@click.option("--device", default="cpu", show_default=True)
@click.option("--workers", default=0, show_default=True,
              help="Data-pipeline concurrency cap (0 = in-process).")
def train(config_path, overrides, out_dir, resume, device, workers):
    """Train adapters + decoder on the configured dataset."""
    del workers  # loading is in-process; flag reserved for large datasets
    out_dir = _out_or_env(out_dir, ENV_CHECKPOINT_DIR)
    cfg = _load(config_path, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    result = trainer.train(cfg, out, device=device, resume=resume)
    counts = count_trainable_params(cfg)
    _emit(
        {
            "command": "train",
            "best_checkpoint": str(result.best_checkpoint),
            "last_checkpoint": str(result.last_checkpoint),
            "log": str(result.log_path),
            "best_value": result.best_value,
            "epochs": result.epochs_run,
            "trainable_params": counts["total"],
        }
    )


@cli.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", default="test", show_default=True,
              type=click.Choice(["train", "val", "test"]))
@click.option("--full-target", is_flag=True, help="Use every sample, not one split.")
@click.option("--overlays", default=0, show_default=True,
              help="Export this many input/GT/prediction triptychs.")
@out_option
def eval_cmd(checkpoint, manifest_path, split, full_target, overlays, out_dir):
    """Evaluate a checkpoint on a dataset with tiled full-image inference."""
    job = evaluator.EvalJob(
        checkpoint=checkpoint,
        manifest=manifest_path,
        out_dir=out_dir,
        split=split,
        overlays=overlays,
        use_full=full_target,
    )
    report = evaluator.evaluate(job)
    _emit(
        {
            "command": "eval",
            "mean_dice": report.mean_dice,
            "mean_iou": report.mean_iou,
            "images": len(report.rows),
            "report": str(Path(out_dir) / "report.csv"),
        }
    )


@cli.command("cross-eval")
@click.option("--pair", "pairs", multiple=True, required=True,
              metavar="NAME=CHECKPOINT:MANIFEST",
              help="Dataset name with its checkpoint and manifest; repeatable.")
@click.option("--split", default="test", show_default=True)
@click.option("--full-target", is_flag=True, help="Evaluate on full target datasets.")
@out_option
def cross_eval_cmd(pairs, split, full_target, out_dir):
    """Cross-dataset transfer matrix over all (source, target) pairs."""
    checkpoints, manifests = {}, {}
    for spec in pairs:
        if "=" not in spec or ":" not in spec.split("=", 1)[1]:
            raise ConfigError(f"--pair '{spec}' must look like NAME=CHECKPOINT:MANIFEST")
        name, _, rest = spec.partition("=")
        ckpt, _, manifest = rest.partition(":")
        checkpoints[name] = ckpt
        manifests[name] = manifest
    matrix = evaluator.cross_eval(
        checkpoints, manifests, out_dir, split=split, use_full=full_target
    )
    _emit(
        {
            "command": "cross-eval",
            "datasets": matrix.datasets,
            "transfer": str(Path(out_dir) / "transfer.csv"),
        }
    )


@cli.command()
@config_option
@set_option
@click.option("--variants", default=",".join(evaluator.ABLATION_VARIANTS), show_default=True,
              help="Comma-separated variant list.")
@click.option("--device", default="cpu", show_default=True)
@out_option
def ablate(config_path, overrides, variants, device, out_dir):
    """Train and evaluate the ablation variants of the base config."""
    cfg = _load(config_path, overrides)
    wanted = [v.strip() for v in variants.split(",") if v.strip()]
    reports = evaluator.run_ablation(cfg, out_dir, variants=wanted, device=device)
    _emit(
        {
            "command": "ablate",
            "variants": {v: r.mean_dice for v, r in reports.items()},
            "report": str(Path(out_dir) / "ablation.csv"),
        }
    )


@cli.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--probs", "save_probs", is_flag=True,
              help="Also write 16-bit probability maps.")
@out_option
@click.argument("inputs", nargs=-1, required=True, type=click.Path(exists=True))
def predict(checkpoint, save_probs, out_dir, inputs):
    """Segment images. Writes one binary mask PNG per input."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model, archive = trainer.load_checkpoint(checkpoint)
    cfg = config_from_dict(archive.meta["config"])
    mean, std = cfg.backbone.pixel_mean, cfg.backbone.pixel_std
    tile = cfg.backbone.image_size
    written = []
    for input_path in inputs:
        image = data_mod.load_image(input_path)
        prob = evaluator.predict_probabilities(model, image, mean, std, tile)
        mask = (prob >= evaluator.THRESHOLD).astype(np.uint8) * 255
        stem = Path(input_path).stem
        mask_path = out_dir / f"{stem}_mask.png"
        Image.fromarray(mask).save(mask_path)
        written.append(str(mask_path))
        if save_probs:
            prob16 = np.round(prob * 65535).astype(np.uint16)
            Image.fromarray(prob16).save(out_dir / f"{stem}_prob.png")
    _emit({"command": "predict", "masks": written})


@cli.command()
@click.option("--entry", "entries", multiple=True, required=True, metavar="LABEL=SUMMARY_JSON",
              help="Evaluation summary to include; repeatable.")
@out_option
def report(entries, out_dir):
    """Combine evaluation summaries into benchmark.{md,csv}."""
    parsed = []
    for spec in entries:
        if "=" not in spec:
            raise ConfigError(f"--entry '{spec}' must look like LABEL=SUMMARY_JSON")
        label, _, path = spec.partition("=")
        parsed.append((label, path))
    path = evaluator.build_benchmark(parsed, out_dir)
    _emit({"command": "report", "benchmark": str(path)})


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.UsageError as e:
        click.echo(f"error[usage]: {e.format_message()}", err=True)
        if e.ctx is not None:
            click.echo(e.ctx.get_usage(), err=True)
        return 2
    except click.ClickException as e:
        click.echo(f"error[cli]: {e.format_message()}", err=True)
        return 1
    except ConfigError as e:
        click.echo(f"error[config]: {e}", err=True)
        return 3
    except LorasegError as e:
        click.echo(f"error[runtime]: {e}", err=True)
        return 1
    except OSError as e:
        click.echo(f"error[io]: {e}", err=True)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
