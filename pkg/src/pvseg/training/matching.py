"""
Ground-truth segments and the bipartite query <-> segment assignment.
"""

from dataclasses import dataclass

import numpy as np
import torch
from pydantic import BaseModel, Field
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from torch import Tensor

from pvseg.data.patches import MaskPatch
from pvseg.errors import ConfigError, NumericalError
from pvseg.model.config import PV_CLASS

# 4-connectivity: edge neighbours only
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

# torch clamps BCE log terms at -100; the pairwise cost mirrors it
LOG_FLOOR = -100.0


class LossWeights(BaseModel):
    class_weight: float = Field(2.0, ge=0.0)
    bce_weight: float = Field(5.0, ge=0.0)
    dice_weight: float = Field(5.0, ge=0.0)


def connected_components(mask: MaskPatch | np.ndarray) -> list[np.ndarray]:
    """
    One boolean ``(H, W)`` array per 4-connected PV component, in raster
    order of each component's first pixel. An empty mask gives ``[]``.
    """
    data = mask.data if isinstance(mask, MaskPatch) else np.asarray(mask)
    labels, count = ndimage.label(data > 0, structure=FOUR_CONNECTED)
    return [labels == i for i in range(1, count + 1)]


def segments_tensor(mask: MaskPatch | np.ndarray | Tensor, like: Tensor) -> Tensor:
    """Components of ``mask`` stacked as ``[G, H, W]`` with the dtype/device of ``like``."""
    if isinstance(mask, Tensor):
        mask = mask.detach().cpu().numpy()
    segments = connected_components(mask)
    h, w = np.asarray(mask.data if isinstance(mask, MaskPatch) else mask).shape
    if not segments:
        return like.new_zeros((0, h, w))
    return torch.from_numpy(np.stack(segments)).to(dtype=like.dtype, device=like.device)


##############################################################################
# costs
##############################################################################
def dice_cost(mask_prob: Tensor, segment: Tensor) -> Tensor:
    """``1 - 2|A.B| / (|A| + |B|)``; two empty masks cost 0."""
    inter = (mask_prob * segment).sum()
    denom = mask_prob.sum() + segment.sum()
    if denom == 0:
        return denom
    return 1 - 2 * inter / denom


def match_cost(
    mask_prob: Tensor,
    pv_prob: Tensor | float,
    segment: Tensor,
    weights: LossWeights = LossWeights(),
) -> Tensor:
    """Cost of assigning one query (mask probabilities, PV probability) to one segment."""
    pv_prob = torch.as_tensor(pv_prob, dtype=mask_prob.dtype)
    class_term = -torch.log(pv_prob).clamp(max=-LOG_FLOOR)
    bce = torch.nn.functional.binary_cross_entropy(mask_prob, segment)
    return (
        weights.class_weight * class_term
        + weights.bce_weight * bce
        + weights.dice_weight * dice_cost(mask_prob, segment)
    )


@torch.no_grad()
def cost_matrix(
    mask_logits: Tensor,
    class_logits: Tensor,
    segments: Tensor,
    weights: LossWeights = LossWeights(),
) -> Tensor:
    """
    ``[N, G]`` matrix of :func:`match_cost` for every (query, segment) pair.

    ``mask_logits`` is ``[N, H, W]``, ``class_logits`` ``[N, C + 1]``,
    ``segments`` ``[G, H, W]``.
    """
    prob = mask_logits.sigmoid().flatten(1)
    target = segments.flatten(1).to(prob.dtype)
    num_pixels = prob.shape[1]

    pv_prob = class_logits.softmax(-1)[:, PV_CLASS]
    class_cost = -torch.log(pv_prob).clamp(max=-LOG_FLOOR)

    log_p = torch.log(prob).clamp(min=LOG_FLOOR)
    log_1mp = torch.log1p(-prob).clamp(min=LOG_FLOOR)
    bce = -(log_p @ target.T + log_1mp @ (1 - target).T) / num_pixels

    inter = prob @ target.T
    denom = prob.sum(-1)[:, None] + target.sum(-1)[None, :]
    dice = torch.where(denom > 0, 1 - 2 * inter / denom.clamp(min=torch.finfo(prob.dtype).tiny), 0.0)

    return (
        weights.class_weight * class_cost[:, None]
        + weights.bce_weight * bce
        + weights.dice_weight * dice
    )


##############################################################################
# assignment
##############################################################################
@dataclass(frozen=True)
class Assignment:
    """Matched pairs sorted by query index; ``total_cost`` is the summed cost."""

    query_indices: np.ndarray
    segment_indices: np.ndarray
    total_cost: float

    def __len__(self) -> int:
        return len(self.query_indices)

    def as_dict(self) -> dict[int, int]:
        """Segment index -> query index."""
        return {int(g): int(q) for q, g in zip(self.query_indices, self.segment_indices)}


def hungarian_match(cost: np.ndarray | Tensor) -> Assignment:
    """
    Minimum-cost injective map from the G segment columns onto the N query
    rows of ``cost``. Requires ``G <= N`` and finite costs.
    """
    if isinstance(cost, Tensor):
        cost = cost.detach().cpu().double().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ConfigError(f"cost matrix must be 2-D, got shape {cost.shape}")
    num_queries, num_segments = cost.shape
    if num_segments > num_queries:
        raise ConfigError(
            f"{num_segments} ground-truth segments but only {num_queries} queries; "
            "raise num_queries"
        )
    if not np.isfinite(cost).all():
        raise NumericalError("matching cost contains non-finite values")
    if num_segments == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Assignment(empty, empty, 0.0)

    rows, cols = linear_sum_assignment(cost)
    optimum = float(cost[rows, cols].sum())
    queries = _lowest_index_queries(cost, optimum)
    order = np.argsort(queries)
    return Assignment(
        query_indices=queries[order],
        segment_indices=order.astype(np.int64),
        total_cost=float(cost[queries, np.arange(num_segments)].sum()),
    )


def _optimal_rest(cost: np.ndarray) -> float:
    if cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def _lowest_index_queries(cost: np.ndarray, optimum: float) -> np.ndarray:
    """
    Among all optimal assignments, the one that gives segment 0 the lowest
    query, then segment 1 the lowest remaining query, and so on.
    """
    num_queries, num_segments = cost.shape
    tolerance = 1e-9 * max(1.0, abs(optimum))
    free = list(range(num_queries))
    fixed = 0.0
    chosen = np.zeros(num_segments, dtype=np.int64)
    for g in range(num_segments):
        for q in free:
            rest = [r for r in free if r != q]
            total = fixed + cost[q, g] + _optimal_rest(cost[np.ix_(rest, range(g + 1, num_segments))])
            if total <= optimum + tolerance:
                chosen[g] = q
                fixed += cost[q, g]
                free.remove(q)
                break
    return chosen
