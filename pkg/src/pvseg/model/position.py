import math

import torch
from torch import Tensor


def _sine_1d(coords: Tensor, dim: int, temperature: float) -> Tensor:
    # [n] -> [n, dim], even features sin, odd features cos
    idx = torch.arange(dim, dtype=coords.dtype, device=coords.device)
    freqs = temperature ** (2 * torch.div(idx, 2, rounding_mode="floor") / max(dim, 1))
    angles = coords[:, None] / freqs[None, :]
    return torch.where(idx % 2 == 0, angles.sin(), angles.cos())


def sine_position_encoding(
    height: int,
    width: int,
    dim: int,
    temperature: float = 10000.0,
    dtype: torch.dtype = torch.float32,
    device: torch.device | None = None,
) -> Tensor:
    """
    Fixed 2-D sinusoidal encoding ``[dim, height, width]``. The first
    ``dim // 2`` channels encode y, the rest encode x; coordinates are
    normalized to ``(0, 2*pi]`` so every level spans the same range.
    """
    y = torch.arange(1, height + 1, dtype=dtype, device=device) / height * 2 * math.pi
    x = torch.arange(1, width + 1, dtype=dtype, device=device) / width * 2 * math.pi
    dim_y = dim // 2
    dim_x = dim - dim_y
    pos_y = _sine_1d(y, dim_y, temperature)  # [h, dim_y]
    pos_x = _sine_1d(x, dim_x, temperature)  # [w, dim_x]
    pos = torch.cat(
        [
            pos_y[:, None, :].expand(height, width, dim_y),
            pos_x[None, :, :].expand(height, width, dim_x),
        ],
        dim=-1,
    )
    return pos.permute(2, 0, 1).contiguous()
