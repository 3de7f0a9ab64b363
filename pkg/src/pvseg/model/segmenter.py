"""
Full model: backbone -> pixel decoder -> masked-attention decoder, with the
pad-to-divisor / crop-back policy for inputs such as 400x400.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from pvseg.data.patches import ImagePatch
from pvseg.model.backbone import Backbone
from pvseg.model.config import ModelConfig
from pvseg.model.mask_decoder import DecoderOutput, DecoderStep, MaskedAttentionDecoder, semantic_inference
from pvseg.model.pixel_decoder import PixelDecoder


@dataclass(frozen=True)
class SegmentationOutput:
    decoder: DecoderOutput
    pixel_embedding: Tensor  # [B, C_e, H, W], already cropped

    @property
    def mask_logits(self) -> Tensor:
        return self.decoder.mask_logits

    @property
    def class_logits(self) -> Tensor:
        return self.decoder.class_logits

    @property
    def steps(self) -> tuple[DecoderStep, ...]:
        return self.decoder.steps

    def semantic(self, threshold: float = 0.5) -> tuple[Tensor, Tensor]:
        return semantic_inference(self.mask_logits, self.class_logits, threshold)

    def step_probabilities(self) -> list[Tensor]:
        """Semantic PV probability ``[B, H, W]`` after every decoder step."""
        return [
            semantic_inference(s.masks.logits, s.class_logits)[1] for s in self.steps
        ]


def pad_to_multiple(x: Tensor, divisor: int) -> Tensor:
    """Pads bottom/right up to a multiple of ``divisor``; reflect where the map allows it."""
    h, w = x.shape[-2:]
    pad_h, pad_w = (-h) % divisor, (-w) % divisor
    if pad_h == 0 and pad_w == 0:
        return x
    mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode)


class SegmentationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.backbone)
        self.pixel_decoder = PixelDecoder(config)
        self.decoder = MaskedAttentionDecoder(config)

    def forward(self, images: Tensor) -> SegmentationOutput:
        """``images`` is ``[B, 3, H, W]`` in [0, 1]; any H, W >= 1."""
        h, w = images.shape[-2:]
        padded = pad_to_multiple(images, self.config.backbone.size_divisor)
        pyramid = self.backbone(padded)
        encoded, pixel_embedding = self.pixel_decoder(pyramid, out_size=(h, w))
        frame = tuple(padded.shape[-2:])
        return SegmentationOutput(self.decoder(encoded, pixel_embedding, frame), pixel_embedding)

    @torch.no_grad()
    def predict(self, image: ImagePatch | Tensor, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
        """Single image -> (binary (H, W) uint8, PV probability (H, W) float32)."""
        was_training = self.training
        self.eval()
        try:
            output = self(image_to_tensor(image, self).unsqueeze(0))
        finally:
            self.train(was_training)
        binary, prob = output.semantic(threshold)
        return binary[0].cpu().numpy(), prob[0].float().cpu().numpy()


def image_to_tensor(image: ImagePatch | Tensor, module: nn.Module) -> Tensor:
    param = next(module.parameters())
    if isinstance(image, ImagePatch):
        image = torch.from_numpy(image.to_chw())
    return image.to(dtype=param.dtype, device=param.device)


def batch_from_patches(images: Sequence[ImagePatch], module: nn.Module) -> Tensor:
    return torch.stack([image_to_tensor(img, module) for img in images])
