from pvseg.training.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from pvseg.training.losses import CriterionConfig, SetCriterion
from pvseg.training.matching import (
    Assignment,
    LossWeights,
    connected_components,
    cost_matrix,
    hungarian_match,
    match_cost,
)
from pvseg.training.trainer import TrainConfig, TrainResult, build_model, train

__all__ = [
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    "CriterionConfig",
    "SetCriterion",
    "Assignment",
    "LossWeights",
    "connected_components",
    "cost_matrix",
    "hungarian_match",
    "match_cost",
    "TrainConfig",
    "TrainResult",
    "build_model",
    "train",
]
