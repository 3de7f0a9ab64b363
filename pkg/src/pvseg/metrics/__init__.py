from pvseg.metrics.confusion import ConfusionCounts, accuracy, confusion, f1, iou
from pvseg.metrics.evaluate import (
    ImageResult,
    MetricReport,
    evaluate_dataset,
    evaluate_predictions,
)

__all__ = [
    "ConfusionCounts",
    "accuracy",
    "confusion",
    "f1",
    "iou",
    "ImageResult",
    "MetricReport",
    "evaluate_dataset",
    "evaluate_predictions",
]
