from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from pvseg.data.manifest import DatasetManifest, Split
from pvseg.data.patches import MaskPatch, load_patch_pair
from pvseg.errors import DataError, ManifestError
from pvseg.metrics.confusion import ConfusionCounts, accuracy, confusion, f1, iou
from pvseg.utils.log import get_logger

logger = get_logger(__name__)

METRIC_COLUMNS = ["IoU", "F1-score", "Accuracy"]
COUNT_COLUMNS = ["TP", "TN", "FP", "FN"]


@dataclass(frozen=True)
class ImageResult:
    image: str
    counts: ConfusionCounts
    has_pv: bool
    predicted_pv: bool

    @property
    def iou(self) -> float:
        return iou(self.counts)

    @property
    def f1(self) -> float:
        return f1(self.counts)

    @property
    def accuracy(self) -> float:
        return accuracy(self.counts)


@dataclass
class MetricReport:
    """Micro (pixel-pooled) metrics plus per-image results and per-entry errors."""

    images: list[ImageResult] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)

    @property
    def counts(self) -> ConfusionCounts:
        return sum((r.counts for r in self.images), ConfusionCounts())

    @property
    def iou(self) -> float:
        return iou(self.counts)

    @property
    def f1(self) -> float:
        return f1(self.counts)

    @property
    def accuracy(self) -> float:
        return accuracy(self.counts) if self.counts.total else float("nan")

    @property
    def mean_iou(self) -> float:
        return float(np.mean([r.iou for r in self.images])) if self.images else float("nan")

    @property
    def mean_f1(self) -> float:
        return float(np.mean([r.f1 for r in self.images])) if self.images else float("nan")

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r.accuracy for r in self.images])) if self.images else float("nan")

    @property
    def image_accuracy(self) -> float:
        """Fraction of images whose predicted PV presence matches the annotation."""
        if not self.images:
            return float("nan")
        return float(np.mean([r.has_pv == r.predicted_pv for r in self.images]))

    def to_frame(self) -> pd.DataFrame:
        """One row: the three metric columns followed by the pooled counts."""
        row = dict(zip(METRIC_COLUMNS, (self.iou, self.f1, self.accuracy)))
        row.update(self.counts.as_dict())
        return pd.DataFrame([row], columns=METRIC_COLUMNS + COUNT_COLUMNS)

    def per_image_frame(self) -> pd.DataFrame:
        rows = [
            {"image": r.image, "IoU": r.iou, "F1-score": r.f1, "Accuracy": r.accuracy,
             **r.counts.as_dict(), "has_pv": r.has_pv, "predicted_pv": r.predicted_pv}
            for r in self.images
        ]
        return pd.DataFrame(
            rows,
            columns=["image", *METRIC_COLUMNS, *COUNT_COLUMNS, "has_pv", "predicted_pv"],
        )

    def to_table(self) -> str:
        table = pd.DataFrame(
            [
                [self.iou, self.f1, self.accuracy],
                [self.mean_iou, self.mean_f1, self.mean_accuracy],
            ],
            index=["micro", "per-image mean"],
            columns=METRIC_COLUMNS,
        )
        lines = [
            table.to_string(float_format=lambda v: f"{v:.4f}"),
            "",
            "  ".join(f"{k}={v}" for k, v in self.counts.as_dict().items()),
            f"images={len(self.images)}  errors={len(self.errors)}  "
            f"image-level PV accuracy={self.image_accuracy:.4f}",
        ]
        return "\n".join(lines)

    def write(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(out_dir / "report.csv", index=False)
        self.per_image_frame().to_csv(out_dir / "per_image.csv", index=False)
        (out_dir / "report.txt").write_text(self.to_table() + "\n")
        if self.errors:
            pd.DataFrame(self.errors, columns=["entry", "error"]).to_csv(
                out_dir / "errors.csv", index=False
            )
        return out_dir / "report.csv"


def evaluate_predictions(
    results: Iterable[tuple[str, MaskPatch | np.ndarray, MaskPatch | np.ndarray]],
) -> MetricReport:
    """``results`` yields ``(name, prediction, ground truth)``."""
    report = MetricReport()
    for name, pred, gt in results:
        counts = confusion(pred, gt)
        report.images.append(
            ImageResult(
                image=name,
                counts=counts,
                has_pv=counts.tp + counts.fn > 0,
                predicted_pv=counts.tp + counts.fp > 0,
            )
        )
    return report


@torch.no_grad()
def evaluate_dataset(
    model,
    manifest: DatasetManifest,
    split: Split | str = Split.test,
    threshold: float = 0.5,
    progress: bool = True,
) -> MetricReport:
    """
    Runs ``model.predict`` on every entry of ``split``. Entries that cannot be
    loaded are recorded in ``report.errors`` and skipped.
    """
    entries = manifest.by_split(split)
    if not entries:
        raise ManifestError(f"split '{Split(split).value}' has no entries")

    report = MetricReport()
    for entry in tqdm(entries, desc=f"Evaluating {Split(split).value}", disable=not progress):
        try:
            image, mask = load_patch_pair(*manifest.resolve(entry))
        except DataError as e:
            logger.error(f"Skipping {entry.image}: {e}")
            report.errors.append((entry.image, str(e)))
            continue
        pred, _ = model.predict(image, threshold)
        counts = confusion(pred, mask)
        report.images.append(
            ImageResult(
                image=entry.image,
                counts=counts,
                has_pv=entry.has_pv,
                predicted_pv=bool(pred.any()),
            )
        )
    return report
