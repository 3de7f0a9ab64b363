import os
from pathlib import Path
from typing import Any

import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from pvseg.data.patches import DEFAULT_PATCH_SIZE
from pvseg.errors import ConfigError
from pvseg.model.config import ActivationName, BackboneConfig, ModelConfig
from pvseg.training.trainer import TrainConfig

OUTPUT_ROOT_ENV = "PVSEG_OUTPUT_ROOT"
RESOLVED_CONFIG_NAME = "resolved_config.{command}.json"


def resolved_config_name(command: str) -> str:
    """One file per command so a later step in the same directory keeps earlier ones."""
    return RESOLVED_CONFIG_NAME.format(command=command)


def resolve_output(path: str | Path) -> Path:
    """Relative output paths land under ``$PVSEG_OUTPUT_ROOT`` when it is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


class RunConfig(BaseModel):
    """
    Flat run configuration. Unknown keys are rejected; ``load`` applies a JSON
    file first and keyword overrides last.
    """

    model_config = ConfigDict(extra="forbid")

    # data
    patch_size: int = Field(DEFAULT_PATCH_SIZE, ge=1)
    manifest: str | None = None
    data_root: str | None = None
    output_dir: str = "runs/default"

    # backbone
    backbone_channels: tuple[int, ...] = (32, 64, 128, 256)
    backbone_blocks: tuple[int, ...] = (1, 1, 1, 1)
    activation: ActivationName = "relu"
    # None follows `activation`
    backbone_activation: ActivationName | None = None

    # pixel decoder / mask decoder
    hidden_dim: int | None = Field(None, ge=1)
    num_heads: int = Field(4, ge=1)
    enc_layers: int = Field(3, ge=0)
    dim_feedforward: int | None = Field(None, ge=1)
    num_queries: int = Field(20, ge=1)
    dec_rounds: int = Field(1, ge=0)
    mask_threshold: float = Field(0.5, gt=0.0, lt=1.0)

    # training
    learning_rate: float = Field(1e-4, ge=0.0)
    weight_decay: float = Field(0.05, ge=0.0)
    batch_size: int = Field(4, ge=1)
    epochs: int = Field(40, ge=1)
    max_steps: int | None = Field(None, ge=1)
    class_weight: float = Field(2.0, ge=0.0)
    bce_weight: float = Field(5.0, ge=0.0)
    dice_weight: float = Field(5.0, ge=0.0)
    no_object_weight: float = Field(0.1, gt=0.0)
    deep_supervision: bool = True
    seed: int = Field(0, ge=0)
    num_threads: int = Field(1, ge=1)

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides: Any) -> "RunConfig":
        values: dict[str, Any] = {}
        if path is not None:
            path = Path(path)
            try:
                values = orjson.loads(path.read_bytes())
            except FileNotFoundError as e:
                raise ConfigError(f"config file not found: {path}") from e
            except orjson.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid JSON: {e}") from e
            if not isinstance(values, dict):
                raise ConfigError(f"{path} must hold a JSON object")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "RunConfig":
        try:
            config = cls.model_validate(values)
            # surfaces invalid combinations (e.g. non-monotone channels) now
            config.model
        except ValidationError as e:
            raise ConfigError(str(e)) from e
        return config

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_json())
        return path

    def to_json(self) -> bytes:
        return orjson.dumps(self.model_dump(mode="json"), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)

    @property
    def output_root(self) -> Path:
        return resolve_output(self.output_dir)

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            channels=self.backbone_channels,
            blocks=self.backbone_blocks,
            activation=self.backbone_activation or self.activation,
        )

    @property
    def model(self) -> ModelConfig:
        embed_dim = self.hidden_dim or self.backbone_channels[0]
        if embed_dim % self.num_heads:
            raise ConfigError(
                f"embedding dim {embed_dim} is not divisible by {self.num_heads} heads"
            )
        return ModelConfig(
            backbone=self.backbone,
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            enc_layers=self.enc_layers,
            dim_feedforward=self.dim_feedforward,
            num_queries=self.num_queries,
            dec_rounds=self.dec_rounds,
            mask_threshold=self.mask_threshold,
            activation=self.activation,
        )

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            max_steps=self.max_steps,
            class_weight=self.class_weight,
            bce_weight=self.bce_weight,
            dice_weight=self.dice_weight,
            no_object_weight=self.no_object_weight,
            deep_supervision=self.deep_supervision,
            seed=self.seed,
            num_threads=self.num_threads,
        )
