"""
Pixel decoder: multi-scale transformer encoder over the flattened pyramid
(F_i -> D_i) and the per-pixel embedding module (D_1 -> E_pixel).
"""

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from pvseg.errors import ShapeMismatchError
from pvseg.model.attention import FeedForward, MultiHeadAttention
from pvseg.model.backbone import FeaturePyramid
from pvseg.model.config import ModelConfig, get_activation
from pvseg.model.position import sine_position_encoding


class EncodedPyramid(FeaturePyramid):
    """D_1..D_L, every level with ``C_e`` channels."""


##############################################################################
# token layout
##############################################################################
@dataclass(frozen=True)
class TokenSequence:
    """
    Flattened multi-level tokens. Levels are stored in order 1..L, each
    row-major; ``boundaries`` has L+1 offsets with ``boundaries[-1] == K``.
    """

    tokens: Tensor  # [B, K, C_e]
    pos: Tensor  # [1 or B, K, C_e]
    level: Tensor  # [1 or B, K, C_e]
    boundaries: tuple[int, ...]
    shapes: tuple[tuple[int, int], ...]

    def __post_init__(self):
        check_layout(self.boundaries, self.shapes, self.tokens.shape[1])
        for name in ("pos", "level"):
            if getattr(self, name).shape[-2:] != self.tokens.shape[-2:]:
                raise ShapeMismatchError(
                    f"{name} encoding {tuple(getattr(self, name).shape)} does not match "
                    f"tokens {tuple(self.tokens.shape)}"
                )

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[1]

    def replace_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.pos, self.level, self.boundaries, self.shapes)


def level_boundaries(shapes: Sequence[tuple[int, int]]) -> tuple[int, ...]:
    offsets = [0]
    for h, w in shapes:
        offsets.append(offsets[-1] + h * w)
    return tuple(offsets)


def check_layout(
    boundaries: Sequence[int], shapes: Sequence[tuple[int, int]], num_tokens: int
) -> None:
    if len(boundaries) != len(shapes) + 1 or boundaries[0] != 0:
        raise ShapeMismatchError(
            f"boundaries {tuple(boundaries)} do not describe {len(shapes)} levels"
        )
    for i, (h, w) in enumerate(shapes):
        if boundaries[i + 1] - boundaries[i] != h * w or h * w < 1:
            raise ShapeMismatchError(
                f"level {i + 1} spans {boundaries[i + 1] - boundaries[i]} tokens "
                f"but its map is {h}x{w}"
            )
    if boundaries[-1] != num_tokens:
        raise ShapeMismatchError(
            f"boundaries end at {boundaries[-1]} but the sequence has {num_tokens} tokens"
        )


def flatten_levels(maps: Sequence[Tensor]) -> tuple[Tensor, tuple[int, ...], tuple[tuple[int, int], ...]]:
    """``[B, C, h, w]`` maps -> ``[B, K, C]`` tokens, level order kept, row-major inside."""
    shapes = tuple((m.shape[-2], m.shape[-1]) for m in maps)
    tokens = torch.cat([m.flatten(2).transpose(1, 2) for m in maps], dim=1)
    return tokens, level_boundaries(shapes), shapes


def unflatten_levels(
    tokens: Tensor, boundaries: Sequence[int], shapes: Sequence[tuple[int, int]]
) -> tuple[Tensor, ...]:
    check_layout(boundaries, shapes, tokens.shape[1])
    b, _, c = tokens.shape
    maps = []
    for i, (h, w) in enumerate(shapes):
        chunk = tokens[:, boundaries[i] : boundaries[i + 1]]
        maps.append(chunk.transpose(1, 2).reshape(b, c, h, w))
    return tuple(maps)


##############################################################################
# multi-scale transformer encoder
##############################################################################
class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward; encodings are added to queries and keys only."""

    def __init__(self, embed_dim: int, num_heads: int, ffn_dim: int, activation: str):
        super().__init__()
        self.norm1 = nn.LayerNorm(embed_dim)
        self.self_attn = MultiHeadAttention(embed_dim, num_heads)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.ffn = FeedForward(embed_dim, ffn_dim, get_activation(activation))

    def forward(self, x: Tensor, encoding: Tensor) -> Tensor:
        h = self.norm1(x)
        qk = h + encoding
        x = x + self.self_attn(qk, qk, h)[0]
        return x + self.ffn(self.norm2(x))


class MultiScaleEncoder(nn.Module):
    def __init__(self, config: ModelConfig, in_channels: Sequence[int]):
        super().__init__()
        embed_dim = config.embed_dim
        self.embed_dim = embed_dim
        self.input_proj = nn.ModuleList(
            [nn.Conv2d(c, embed_dim, kernel_size=1) for c in in_channels]
        )
        self.level_embed = nn.Parameter(torch.empty(len(in_channels), embed_dim))
        self.pos_offset = nn.Parameter(torch.zeros(embed_dim))
        self.layers = nn.ModuleList(
            [
                EncoderLayer(embed_dim, config.num_heads, config.ffn_dim, config.activation)
                for _ in range(config.enc_layers)
            ]
        )
        for proj in self.input_proj:
            nn.init.xavier_uniform_(proj.weight, gain=1)
            nn.init.zeros_(proj.bias)
        nn.init.normal_(self.level_embed)

    def flatten_and_project(self, pyramid: FeaturePyramid) -> TokenSequence:
        if len(pyramid) != len(self.input_proj):
            raise ShapeMismatchError(
                f"encoder expects {len(self.input_proj)} levels, got {len(pyramid)}"
            )
        projected = [proj(f) for proj, f in zip(self.input_proj, pyramid)]
        tokens, boundaries, shapes = flatten_levels(projected)

        pos, level = [], []
        for lvl, (h, w) in enumerate(shapes):
            sine = sine_position_encoding(
                h, w, self.embed_dim, dtype=tokens.dtype, device=tokens.device
            )
            pos.append(sine.flatten(1).transpose(0, 1) + self.pos_offset)
            level.append(self.level_embed[lvl].expand(h * w, -1))
        return TokenSequence(
            tokens=tokens,
            pos=torch.cat(pos, dim=0).unsqueeze(0),
            level=torch.cat(level, dim=0).unsqueeze(0),
            boundaries=boundaries,
            shapes=shapes,
        )

    def encode_tokens(self, seq: TokenSequence) -> TokenSequence:
        x = seq.tokens
        encoding = seq.pos + seq.level
        for layer in self.layers:
            x = layer(x, encoding)
        return seq.replace_tokens(x)

    @staticmethod
    def unflatten(seq: TokenSequence) -> EncodedPyramid:
        return EncodedPyramid(unflatten_levels(seq.tokens, seq.boundaries, seq.shapes))

    def forward(self, pyramid: FeaturePyramid) -> EncodedPyramid:
        return self.unflatten(self.encode_tokens(self.flatten_and_project(pyramid)))


##############################################################################
# per-pixel embedding
##############################################################################
def upsample2x(x: Tensor) -> Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class PerPixelEmbedding(nn.Module):
    """D_1 at stride 4 -> E_pixel at full resolution via two 2x bilinear steps."""

    def __init__(self, embed_dim: int, activation: str):
        super().__init__()
        self.conv1 = nn.Conv2d(embed_dim, embed_dim, 3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(embed_dim, embed_dim, 3, padding=1, padding_mode="replicate")
        self.activation = get_activation(activation)
        self.proj = nn.Conv2d(embed_dim, embed_dim, kernel_size=1)

    def forward(self, d1: Tensor, out_size: tuple[int, int] | None = None) -> Tensor:
        x = self.activation(self.conv1(upsample2x(d1)))
        x = self.activation(self.conv2(upsample2x(x)))
        x = self.proj(x)
        if out_size is not None:
            h, w = out_size
            if h > x.shape[-2] or w > x.shape[-1]:
                raise ShapeMismatchError(
                    f"cannot crop a {x.shape[-2]}x{x.shape[-1]} embedding to {h}x{w}"
                )
            x = x[..., :h, :w]
        return x


class PixelDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.encoder = MultiScaleEncoder(config, config.backbone.channels)
        self.pixel_embedding = PerPixelEmbedding(config.embed_dim, config.activation)

    def forward(
        self, pyramid: FeaturePyramid, out_size: tuple[int, int] | None = None
    ) -> tuple[EncodedPyramid, Tensor]:
        encoded = self.encoder(pyramid)
        return encoded, self.pixel_embedding(encoded[0], out_size)

