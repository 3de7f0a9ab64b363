import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from pydantic import Field
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from pvseg.data.manifest import DatasetManifest, ManifestEntry, Split
from pvseg.data.patches import load_patch_pair
from pvseg.errors import DivergenceError, ManifestError
from pvseg.metrics.evaluate import evaluate_dataset
from pvseg.model.config import ModelConfig
from pvseg.model.segmenter import SegmentationModel
from pvseg.training.checkpoint import save_checkpoint
from pvseg.training.losses import TERMS, CriterionConfig, SetCriterion
from pvseg.training.matching import segments_tensor
from pvseg.utils.log import get_logger

logger = get_logger(__name__)

HISTORY_COLUMNS = [
    "epoch",
    "step",
    "loss",
    *TERMS,
    "val_iou",
    "val_f1",
    "val_accuracy",
]


class TrainConfig(CriterionConfig):
    learning_rate: float = Field(1e-4, ge=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    batch_size: int = Field(4, ge=1)
    epochs: int = Field(40, ge=1)
    # caps optimizer steps across all epochs
    max_steps: int | None = Field(None, ge=1)
    seed: int = Field(0, ge=0)
    num_threads: int = Field(1, ge=1)


@dataclass
class TrainResult:
    model: SegmentationModel
    history: pd.DataFrame
    last_checkpoint: Path
    best_checkpoint: Path | None
    steps: int


class PatchDataset(Dataset):
    """Loads manifest entries of one split lazily as ``(image [3, H, W], mask [H, W])``."""

    def __init__(self, manifest: DatasetManifest, split: Split | str = Split.train):
        self.manifest = manifest
        self.entries: list[ManifestEntry] = manifest.by_split(split)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, idx: int) -> tuple[torch.Tensor, torch.Tensor, int]:
        image, mask = load_patch_pair(*self.manifest.resolve(self.entries[idx]))
        return torch.from_numpy(image.to_chw()), torch.from_numpy(mask.data), idx


##############################################################################
# determinism
##############################################################################
def seed_everything(seed: int, num_threads: int = 1) -> torch.Generator:
    torch.manual_seed(seed)
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True, warn_only=True)
    return torch.Generator().manual_seed(seed)


def build_model(config: ModelConfig, seed: int = 0) -> SegmentationModel:
    torch.manual_seed(seed)
    return SegmentationModel(config)


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
        foreach=False,
    )


##############################################################################
# training loop
##############################################################################
def _finite(*tensors: torch.Tensor) -> bool:
    return all(bool(torch.isfinite(t).all()) for t in tensors)


def _dump_batch(
    output_dir: Path, step: int, images: torch.Tensor, masks: torch.Tensor, entries: list[str], loss: dict[str, float]
) -> Path:
    path = output_dir / f"divergence_step{step:06d}.pt"
    torch.save(
        {"step": step, "images": images, "masks": masks, "entries": entries, "loss": loss},
        path,
    )
    return path


def run_config_echo(model_config: ModelConfig, config: TrainConfig) -> dict[str, Any]:
    """The flat run-config dict checkpoints carry, so the CLI can rebuild the model."""
    backbone = model_config.backbone
    return {
        "backbone_channels": list(backbone.channels),
        "backbone_blocks": list(backbone.blocks),
        "activation": model_config.activation,
        "backbone_activation": None if backbone.activation == model_config.activation else backbone.activation,
        "hidden_dim": model_config.hidden_dim,
        "num_heads": model_config.num_heads,
        "enc_layers": model_config.enc_layers,
        "dim_feedforward": model_config.dim_feedforward,
        "num_queries": model_config.num_queries,
        "dec_rounds": model_config.dec_rounds,
        "mask_threshold": model_config.mask_threshold,
        **config.model_dump(mode="json"),
    }


def train(
    manifest: DatasetManifest,
    model_config: ModelConfig,
    config: TrainConfig,
    output_dir: str | Path,
    config_echo: dict[str, Any] | None = None,
    model: SegmentationModel | None = None,
) -> TrainResult:
    """
    AdamW on the manifest's train split. Each epoch appends a row to
    ``history.csv``, writes ``last.ckpt`` and, when validation IoU improves,
    ``best.ckpt``.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    dataset = PatchDataset(manifest, Split.train)
    if len(dataset) == 0:
        raise ManifestError("manifest has no entries in the train split")
    has_val = bool(manifest.by_split(Split.val))

    generator = seed_everything(config.seed, config.num_threads)
    if model is None:
        model = build_model(model_config, config.seed)
    criterion = SetCriterion(config)
    optimizer = make_optimizer(model, config)
    loader = DataLoader(
        dataset,
        batch_size=config.batch_size,
        shuffle=True,
        generator=generator,
        num_workers=0,
    )
    config_echo = config_echo or run_config_echo(model_config, config)

    logger.info(
        f"Training on {len(dataset)} patches for {config.epochs} epochs "
        f"(batch {config.batch_size}, lr {config.learning_rate}, "
        f"{sum(p.numel() for p in model.parameters())} parameters)"
    )

    rows = []
    step = 0
    best_iou = -math.inf
    best_path = None
    last_path = output_dir / "last.ckpt"
    for epoch in range(1, config.epochs + 1):
        model.train()
        sums = {k: 0.0 for k in ("loss", *TERMS)}
        batches = 0
        for images, masks, indices in tqdm(loader, desc=f"Epoch {epoch}", leave=False):
            images = images.to(next(model.parameters()).dtype)
            output = model(images)
            loss, breakdown = torch.tensor(float("nan")), {}
            if _finite(output.mask_logits, output.class_logits):
                segments = [segments_tensor(m, output.mask_logits) for m in masks]
                loss, breakdown = criterion(output, segments)

            if not torch.isfinite(loss):
                values = {k: float(v) for k, v in breakdown.items()}
                entries = [dataset.entries[int(i)].image for i in indices]
                dump = _dump_batch(output_dir, step, images, masks, entries, values)
                logger.error(f"Non-finite loss at step {step}: {values}; batch dumped to {dump}")
                raise DivergenceError(f"loss became non-finite at step {step}", dump)

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            batches += 1
            sums["loss"] += loss.item()
            for k in TERMS:
                sums[k] += breakdown[k].item()
            if config.max_steps is not None and step >= config.max_steps:
                break

        row = {"epoch": epoch, "step": step}
        row.update({k: v / max(batches, 1) for k, v in sums.items()})
        if has_val:
            report = evaluate_dataset(model, manifest, Split.val, progress=False)
            row.update(val_iou=report.iou, val_f1=report.f1, val_accuracy=report.accuracy)
        else:
            row.update(val_iou=np.nan, val_f1=np.nan, val_accuracy=np.nan)
        rows.append(row)
        history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
        history.to_csv(output_dir / "history.csv", index=False)

        save_checkpoint(last_path, model, step, config_echo, optimizer)
        if has_val and row["val_iou"] > best_iou:
            best_iou = row["val_iou"]
            best_path = save_checkpoint(output_dir / "best.ckpt", model, step, config_echo, optimizer)

        logger.info(
            f"Epoch {epoch}: loss {row['loss']:.4f} "
            f"(ce {row['loss_ce']:.4f}, bce {row['loss_bce']:.4f}, dice {row['loss_dice']:.4f}), "
            f"val IoU {row['val_iou']:.4f}, F1 {row['val_f1']:.4f}, Acc {row['val_accuracy']:.4f}"
        )
        if config.max_steps is not None and step >= config.max_steps:
            logger.info(f"Reached max_steps={config.max_steps}")
            break

    return TrainResult(
        model=model,
        history=pd.DataFrame(rows, columns=HISTORY_COLUMNS),
        last_checkpoint=last_path,
        best_checkpoint=best_path,
        steps=step,
    )
