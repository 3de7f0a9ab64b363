from dataclasses import dataclass

import torch
from torch import Tensor, nn

from pvseg.data.patches import ImagePatch
from pvseg.errors import ShapeMismatchError
from pvseg.model.config import BackboneConfig, get_activation


##############################################################################
# pyramid containers
##############################################################################
@dataclass(frozen=True)
class FeaturePyramid:
    """Feature maps ``[B, C_i, H_i, W_i]`` ordered from highest resolution (F1) down."""

    maps: tuple[Tensor, ...]

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, idx: int) -> Tensor:
        return self.maps[idx]

    def __iter__(self):
        return iter(self.maps)

    @property
    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple((m.shape[-2], m.shape[-1]) for m in self.maps)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.maps)


def _norm(channels: int) -> nn.Module:
    # single-group GroupNorm: per-sample statistics only
    return nn.GroupNorm(1, channels)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, activation: str):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.norm1 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = _norm(out_channels)
        self.activation = get_activation(activation)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride),
                _norm(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        out = self.activation(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.activation(out + self.shortcut(x))


class Backbone(nn.Module):
    """
    Stride-4 stem followed by stride-2 residual stages. Produces one map per
    entry of ``config.channels`` at strides 4, 8, 16, 32.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        c1 = config.channels[0]
        stem_mid = max(c1 // 2, 1)
        self.stem = nn.Sequential(
            nn.Conv2d(3, stem_mid, 3, stride=2, padding=1),
            _norm(stem_mid),
            get_activation(config.activation),
            nn.Conv2d(stem_mid, c1, 3, stride=2, padding=1),
            _norm(c1),
            get_activation(config.activation),
        )
        stages = []
        in_channels = c1
        for level, (out_channels, num_blocks) in enumerate(
            zip(config.channels, config.blocks)
        ):
            stride = 1 if level == 0 else 2
            blocks = [ResidualBlock(in_channels, out_channels, stride, config.activation)]
            blocks += [
                ResidualBlock(out_channels, out_channels, 1, config.activation)
                for _ in range(num_blocks - 1)
            ]
            stages.append(nn.Sequential(*blocks))
            in_channels = out_channels
        self.stages = nn.ModuleList(stages)

    def check_input_size(self, height: int, width: int) -> None:
        divisor = self.config.size_divisor
        if height % divisor or width % divisor:
            pad_h = (-height) % divisor
            pad_w = (-width) % divisor
            raise ShapeMismatchError(
                f"input {height}x{width} is not divisible by {divisor}; "
                f"pad by {pad_h} rows and {pad_w} columns to {height + pad_h}x{width + pad_w}"
            )

    def forward(self, x: Tensor) -> FeaturePyramid:
        self.check_input_size(x.shape[-2], x.shape[-1])
        x = self.stem(x)
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return FeaturePyramid(tuple(maps))


def extract_features(image: ImagePatch | Tensor, backbone: Backbone) -> FeaturePyramid:
    """``image`` is a patch, ``[B, 3, H, W]`` or ``[3, H, W]``."""
    if isinstance(image, ImagePatch):
        param = next(backbone.parameters())
        image = torch.from_numpy(image.to_chw()).to(dtype=param.dtype, device=param.device)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return backbone(image)
