"""
``pvseg`` command line: synth, tile, split, train, eval, predict.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import logging
from pathlib import Path
from typing import Any

import fire
import numpy as np
import orjson
import torch
from fire.core import FireExit
from PIL import Image
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler

from pvseg.config import RunConfig, resolve_output, resolved_config_name
from pvseg.data.manifest import (
    DatasetManifest,
    Split,
    SplitSpec,
    read_manifest,
    split_dataset,
    validate_manifest,
    write_manifest,
)
from pvseg.data.patches import DEFAULT_PATCH_SIZE, ImagePatch, read_image
from pvseg.data.tiling import tile_directory, tile_files
from pvseg.errors import ConfigError, ManifestError, PVSegError, UsageError
from pvseg.logging import log_to_run_dir, setup_logging
from pvseg.metrics.evaluate import evaluate_dataset
from pvseg.model.segmenter import SegmentationModel, image_to_tensor
from pvseg.synthgen.scene import SceneSpec, write_dataset
from pvseg.training.checkpoint import load_checkpoint
from pvseg.training.trainer import train as run_training
from pvseg.utils.log import get_logger

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.jsonl"
# RGBA of predicted PV pixels in the overlay
OVERLAY_RGBA = (255, 0, 0, 128)


def _write_json(path: Path, payload: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
    return path


def _read_json(path: str | Path) -> dict[str, Any]:
    try:
        values = orjson.loads(Path(path).read_bytes())
    except FileNotFoundError as e:
        raise ConfigError(f"file not found: {path}") from e
    except orjson.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return values


def _split(name: str) -> Split:
    try:
        return Split(name)
    except ValueError as e:
        raise UsageError(f"unknown split {name!r}; use train, val or test") from e


def _validated(model_cls, values: dict[str, Any]):
    try:
        return model_cls.model_validate(values)
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def load_model(checkpoint: str | Path) -> tuple[SegmentationModel, RunConfig, int]:
    ckpt = load_checkpoint(checkpoint)
    config = RunConfig.from_dict(ckpt.config)
    model = SegmentationModel(config.model)
    ckpt.load_into(model)
    model.eval()
    return model, config, ckpt.step


def overlay(image: ImagePatch, mask: np.ndarray) -> Image.Image:
    base = Image.fromarray(image.to_uint8()).convert("RGBA")
    layer = np.zeros((*mask.shape, 4), dtype=np.uint8)
    layer[mask.astype(bool)] = OVERLAY_RGBA
    return Image.alpha_composite(base, Image.fromarray(layer))


class PVSegCLI:
    """Solar-PV segmentation: data preparation, training, evaluation and prediction."""

    def synth(self, count: int = 10, out: str = "synth", spec: str | None = None, seed: int | None = None):
        """Generates ``count`` synthetic scenes plus a manifest under ``out``."""
        values = _read_json(spec) if spec else {}
        if seed is not None:
            values["seed"] = seed
        scene_spec = _validated(SceneSpec, values)
        out_dir = resolve_output(out)
        manifest = write_dataset(scene_spec, count, out_dir)
        problems = validate_manifest(manifest)
        if problems:
            raise ManifestError("generated manifest is inconsistent: " + "; ".join(problems))
        _write_json(
            out_dir / resolved_config_name("synth"),
            {"command": "synth", "count": count, "spec": scene_spec.model_dump(mode="json")},
        )
        print(f"Wrote {len(manifest)} scenes to {out_dir / MANIFEST_NAME}")

    def tile(
        self,
        raster: str,
        mask: str,
        out: str = "tiles",
        patch_size: int = DEFAULT_PATCH_SIZE,
        stride: int | None = None,
    ):
        """Tiles a raster/mask pair (or two directories of same-named PNGs) into patches."""
        stride = stride or patch_size
        out_dir = resolve_output(out)
        if Path(raster).is_dir():
            manifest = tile_directory(raster, mask, out_dir, patch_size, stride)
        else:
            manifest = DatasetManifest(
                root=out_dir, entries=tile_files(raster, mask, out_dir, patch_size, stride)
            )
        write_manifest(manifest, out_dir / MANIFEST_NAME)
        _write_json(
            out_dir / resolved_config_name("tile"),
            {"command": "tile", "raster": raster, "mask": mask, "patch_size": patch_size, "stride": stride},
        )
        print(f"Wrote {len(manifest)} patches to {out_dir / MANIFEST_NAME}")

    def split(
        self,
        manifest: str,
        out: str | None = None,
        train: float = 0.6,
        val: float = 0.2,
        test: float = 0.2,
        seed: int = 0,
        stratify: bool = True,
    ):
        """Assigns train/val/test splits stratified by PV presence; rewrites ``manifest`` unless ``out`` is given."""
        spec = _validated(
            SplitSpec,
            {"train_frac": train, "val_frac": val, "test_frac": test, "stratify_positive": stratify, "seed": seed},
        )
        source = read_manifest(manifest)
        result = split_dataset(source, spec)
        out_path = resolve_output(out) if out else Path(manifest)
        write_manifest(result, out_path)
        _write_json(
            out_path.parent / resolved_config_name("split"),
            {"command": "split", "manifest": manifest, "spec": spec.model_dump(mode="json")},
        )
        counts = result.split_counts()
        print(" ".join(f"{s}={counts[s]}" for s in ("train", "val", "test")))

    def train(self, config: str | None = None, **overrides):
        """Trains from a JSON run config; ``--key=value`` flags override its keys."""
        run_config = RunConfig.load(config, **overrides)
        if not run_config.manifest:
            raise UsageError("train needs a manifest (config key or --manifest)")
        out_dir = run_config.output_root
        log_to_run_dir(out_dir)
        run_config.dump(out_dir / resolved_config_name("train"))

        manifest = read_manifest(run_config.manifest, root=run_config.data_root)
        result = run_training(
            manifest,
            run_config.model,
            run_config.train,
            out_dir,
            config_echo=run_config.model_dump(mode="json"),
        )
        print(result.history.to_string(index=False))
        print(f"Checkpoint: {result.last_checkpoint}")

    def eval(
        self,
        checkpoint: str,
        split: str = "test",
        manifest: str | None = None,
        data_root: str | None = None,
        out: str | None = None,
        threshold: float = 0.5,
    ):
        """Evaluates a checkpoint on one manifest split; prints the metric table."""
        model, run_config, step = load_model(checkpoint)
        manifest_path = manifest or run_config.manifest
        if not manifest_path:
            raise UsageError("eval needs --manifest or a checkpoint trained from one")
        out_dir = resolve_output(out) if out else Path(checkpoint).parent / f"eval_{split}"
        log_to_run_dir(out_dir)

        data = read_manifest(manifest_path, root=data_root or (None if manifest else run_config.data_root))
        report = evaluate_dataset(model, data, _split(split), threshold)
        report.write(out_dir)
        _write_json(
            out_dir / resolved_config_name("eval"),
            {
                "command": "eval",
                "checkpoint": str(checkpoint),
                "step": step,
                "split": split,
                "manifest": str(manifest_path),
                "threshold": threshold,
                "run": run_config.model_dump(mode="json"),
            },
        )
        print(report.to_table())

    def predict(
        self,
        checkpoint: str,
        image: str,
        out: str | None = None,
        steps: bool = False,
        threshold: float = 0.5,
    ):
        """Writes ``<stem>_mask.png`` and ``<stem>_overlay.png`` (and per-step masks with ``--steps``)."""
        model, run_config, step = load_model(checkpoint)
        patch = ImagePatch(read_image(image))
        stem = Path(image).stem
        out_dir = resolve_output(out) if out else Path(checkpoint).parent / "predictions"
        log_to_run_dir(out_dir)

        binary, _ = model.predict(patch, threshold)
        out_dir.mkdir(parents=True, exist_ok=True)
        Image.fromarray(binary * 255).save(out_dir / f"{stem}_mask.png")
        overlay(patch, binary).save(out_dir / f"{stem}_overlay.png")

        if steps:
            step_dir = out_dir / f"{stem}_steps"
            step_dir.mkdir(parents=True, exist_ok=True)
            with torch.no_grad():
                output = model(image_to_tensor(patch, model).unsqueeze(0))
            for i, prob in enumerate(output.step_probabilities()):
                pixels = np.round(prob[0].detach().cpu().numpy() * 255).astype(np.uint8)
                Image.fromarray(pixels).save(step_dir / f"step_{i:02d}.png")

        _write_json(
            out_dir / resolved_config_name("predict"),
            {
                "command": "predict",
                "checkpoint": str(checkpoint),
                "step": step,
                "image": image,
                "threshold": threshold,
                "run": run_config.model_dump(mode="json"),
            },
        )
        print(f"PV pixels: {int(binary.sum())} / {binary.size}; wrote {out_dir}")


def _report(message: str) -> None:
    logger.error(message)
    # run commands log to their file only
    if not any(isinstance(h, RichHandler) for h in logging.getLogger("pvseg").handlers):
        Console(stderr=True).print("ERROR", message, style="red", markup=False, highlight=False)


def main(argv: list[str] | None = None) -> int:
    setup_logging("pvseg", logging.INFO)
    try:
        fire.Fire(PVSegCLI, command=argv, name="pvseg", serialize=lambda _: None)
    except FireExit as e:
        return 0 if e.code in (0, None) else UsageError.exit_code
    except PVSegError as e:
        _report(str(e))
        return e.exit_code
    except ValidationError as e:
        _report(str(e))
        return UsageError.exit_code
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
