"""
Set-prediction loss: match queries to connected PV segments, then class
cross-entropy for every query plus sigmoid-BCE and Dice for matched ones.
"""

from typing import Sequence

import torch
import torch.nn.functional as F
from pydantic import Field
from torch import Tensor, nn

from pvseg.model.config import NUM_CLASSES, PV_CLASS
from pvseg.model.mask_decoder import DecoderStep
from pvseg.model.segmenter import SegmentationOutput
from pvseg.training.matching import Assignment, LossWeights, cost_matrix, hungarian_match

NO_OBJECT_CLASS = NUM_CLASSES
TERMS = ("loss_ce", "loss_bce", "loss_dice")


class CriterionConfig(LossWeights):
    no_object_weight: float = Field(0.1, gt=0.0)
    deep_supervision: bool = True


def sigmoid_bce_loss(mask_logits: Tensor, targets: Tensor, num_masks: int) -> Tensor:
    """Per-mask pixel-mean BCE, summed over masks and divided by ``num_masks``."""
    loss = F.binary_cross_entropy_with_logits(mask_logits, targets, reduction="none")
    return loss.flatten(1).mean(1).sum() / num_masks


def dice_loss(mask_logits: Tensor, targets: Tensor, num_masks: int) -> Tensor:
    prob = mask_logits.sigmoid().flatten(1)
    targets = targets.flatten(1)
    numerator = 2 * (prob * targets).sum(-1)
    denominator = prob.sum(-1) + targets.sum(-1)
    loss = 1 - numerator / denominator.clamp(min=torch.finfo(prob.dtype).tiny)
    loss = torch.where(denominator > 0, loss, torch.zeros_like(loss))
    return loss.sum() / num_masks


class SetCriterion(nn.Module):
    def __init__(self, config: CriterionConfig = CriterionConfig()):
        super().__init__()
        self.config = config
        class_weights = torch.ones(NUM_CLASSES + 1)
        class_weights[NO_OBJECT_CLASS] = config.no_object_weight
        self.register_buffer("class_weights", class_weights, persistent=False)

    @property
    def weights(self) -> dict[str, float]:
        return {
            "loss_ce": self.config.class_weight,
            "loss_bce": self.config.bce_weight,
            "loss_dice": self.config.dice_weight,
        }

    def match(self, step: DecoderStep, segments: Sequence[Tensor]) -> list[Assignment]:
        return [
            hungarian_match(
                cost_matrix(step.masks.logits[b], step.class_logits[b], seg, self.config)
            )
            for b, seg in enumerate(segments)
        ]

    def step_losses(self, step: DecoderStep, segments: Sequence[Tensor]) -> dict[str, Tensor]:
        """Unweighted terms for one decoder step; ``segments[b]`` is ``[G_b, H, W]``."""
        class_logits = step.class_logits
        mask_logits = step.masks.logits
        assignments = self.match(step, segments)

        target_classes = torch.full(
            class_logits.shape[:2], NO_OBJECT_CLASS, dtype=torch.long, device=class_logits.device
        )
        matched_logits, matched_targets = [], []
        for b, (assignment, seg) in enumerate(zip(assignments, segments)):
            if not len(assignment):
                continue
            queries = torch.as_tensor(assignment.query_indices, device=class_logits.device)
            target_classes[b, queries] = PV_CLASS
            matched_logits.append(mask_logits[b, queries])
            matched_targets.append(seg[torch.as_tensor(assignment.segment_indices, device=seg.device)])

        loss_ce = F.cross_entropy(
            class_logits.transpose(1, 2),
            target_classes,
            weight=self.class_weights.to(class_logits.dtype),
        )
        if matched_logits:
            src = torch.cat(matched_logits)
            tgt = torch.cat(matched_targets).to(src.dtype)
            num_masks = src.shape[0]
            loss_bce = sigmoid_bce_loss(src, tgt, num_masks)
            loss_dice = dice_loss(src, tgt, num_masks)
        else:
            loss_bce = loss_dice = mask_logits.sum() * 0.0
        return {"loss_ce": loss_ce, "loss_bce": loss_bce, "loss_dice": loss_dice}

    def forward(
        self, output: SegmentationOutput, segments: Sequence[Tensor]
    ) -> tuple[Tensor, dict[str, Tensor]]:
        """
        Returns ``(total, breakdown)``. The breakdown holds the final-step
        terms under their plain names and auxiliary terms suffixed ``_<step>``.
        """
        weights = self.weights
        breakdown = self.step_losses(output.decoder.final, segments)
        total = sum(weights[k] * v for k, v in breakdown.items())
        if self.config.deep_supervision:
            for i, step in enumerate(output.decoder.aux_steps):
                for k, v in self.step_losses(step, segments).items():
                    breakdown[f"{k}_{i}"] = v
                    total = total + weights[k] * v
        return total, breakdown
