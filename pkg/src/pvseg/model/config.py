from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator
from torch import nn

ActivationName = Literal["relu", "gelu", "tanh", "silu"]

# class columns of ClassLogits; the no-object column is appended last
PV_CLASS = 0
BACKGROUND_CLASS = 1
NUM_CLASSES = 2


def get_activation(name: ActivationName) -> nn.Module:
    if name == "relu":
        return nn.ReLU()
    if name == "gelu":
        return nn.GELU()
    if name == "tanh":
        return nn.Tanh()
    if name == "silu":
        return nn.SiLU()
    raise ValueError(f"activation should be relu/gelu/tanh/silu, not {name}.")


class BackboneConfig(BaseModel):
    # C_F1..C_F4; level i sits at stride 4 * 2**i
    channels: tuple[int, ...] = (32, 64, 128, 256)
    blocks: tuple[int, ...] = (1, 1, 1, 1)
    activation: ActivationName = "relu"

    @field_validator("channels", "blocks")
    @classmethod
    def _positive(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if not v or any(c < 1 for c in v):
            raise ValueError(f"expected non-empty positive integers, got {v}")
        return v

    @model_validator(mode="after")
    def _monotone(self):
        if len(self.channels) != len(self.blocks):
            raise ValueError("channels and blocks must have one entry per level")
        if any(a > b for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must widen monotonically, got {self.channels}")
        return self

    @property
    def num_levels(self) -> int:
        return len(self.channels)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(4 * 2**i for i in range(self.num_levels))

    @property
    def size_divisor(self) -> int:
        return self.strides[-1]


class ModelConfig(BaseModel):
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    # C_e; None binds it to C_F1
    hidden_dim: int | None = Field(None, ge=1)
    num_heads: int = Field(4, ge=1)
    enc_layers: int = Field(3, ge=0)
    dim_feedforward: int | None = Field(None, ge=1)
    num_queries: int = Field(20, ge=1)
    dec_rounds: int = Field(1, ge=0)
    mask_threshold: float = Field(0.5, gt=0.0, lt=1.0)
    activation: ActivationName = "relu"

    @property
    def embed_dim(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else self.backbone.channels[0]

    @property
    def ffn_dim(self) -> int:
        return self.dim_feedforward if self.dim_feedforward is not None else 4 * self.embed_dim

    @property
    def num_levels(self) -> int:
        return self.backbone.num_levels

    @property
    def num_steps(self) -> int:
        """Entries in the per-step mask trace, including the initial prediction."""
        return self.num_levels * self.dec_rounds + 1
