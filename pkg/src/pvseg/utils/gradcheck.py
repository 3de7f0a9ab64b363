from typing import Callable, Sequence

import torch
from torch import Tensor


def max_relative_error(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-4,
    max_checks: int | None = None,
    seed: int = 0,
) -> float:
    """
    Worst ``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` over
    the elements of ``inputs``, with central differences of step ``eps``.

    ``fn`` takes no arguments, reads ``inputs`` (float64 leaf tensors with
    ``requires_grad``) and returns a scalar. ``max_checks`` samples that many
    elements per input instead of visiting all of them.
    """
    inputs = list(inputs)
    for x in inputs:
        x.grad = None
    fn().backward()
    analytic = [x.grad.detach().clone() if x.grad is not None else torch.zeros_like(x) for x in inputs]

    generator = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for x, grad in zip(inputs, analytic):
            flat = x.view(-1)
            indices = torch.arange(flat.numel())
            if max_checks is not None and flat.numel() > max_checks:
                indices = torch.randperm(flat.numel(), generator=generator)[:max_checks]
            for i in indices.tolist():
                old = flat[i].item()
                flat[i] = old + eps
                plus = fn().item()
                flat[i] = old - eps
                minus = fn().item()
                flat[i] = old
                numeric = (plus - minus) / (2 * eps)
                a = grad.view(-1)[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
