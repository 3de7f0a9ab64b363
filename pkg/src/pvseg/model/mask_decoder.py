"""
Masked-attention transformer decoder: N learned queries refined against
D_L..D_1 (coarse to fine), each step restricted to the region the previous
step's mask predicted.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from pvseg.errors import ShapeMismatchError
from pvseg.model.attention import FeedForward, MultiHeadAttention
from pvseg.model.config import NUM_CLASSES, PV_CLASS, ModelConfig, get_activation
from pvseg.model.pixel_decoder import EncodedPyramid
from pvseg.model.position import sine_position_encoding


##############################################################################
# value types
##############################################################################
@dataclass(frozen=True)
class MaskSet:
    logits: Tensor  # [B, N, H, W]

    @property
    def probabilities(self) -> Tensor:
        return self.logits.sigmoid()


@dataclass(frozen=True)
class DecoderStep:
    masks: MaskSet
    class_logits: Tensor  # [B, N, NUM_CLASSES + 1]


@dataclass(frozen=True)
class DecoderOutput:
    steps: tuple[DecoderStep, ...]  # initial prediction first, final last

    @property
    def final(self) -> DecoderStep:
        return self.steps[-1]

    @property
    def mask_logits(self) -> Tensor:
        return self.final.masks.logits

    @property
    def class_logits(self) -> Tensor:
        return self.final.class_logits

    @property
    def aux_steps(self) -> tuple[DecoderStep, ...]:
        return self.steps[:-1]


class MLP(nn.Module):
    """Per-query MLP (Linear + ReLU between layers)."""

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int = 3):
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1) + [output_dim]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


class QueryEmbeddings(nn.Module):
    """N content queries and their positional embeddings, both ``[N, C_e]``."""

    def __init__(self, num_queries: int, embed_dim: int):
        super().__init__()
        self.content = nn.Embedding(num_queries, embed_dim)
        self.pos = nn.Embedding(num_queries, embed_dim)

    @property
    def num_queries(self) -> int:
        return self.content.num_embeddings

    def expand(self, batch_size: int) -> tuple[Tensor, Tensor]:
        return (
            self.content.weight.unsqueeze(0).expand(batch_size, -1, -1),
            self.pos.weight.unsqueeze(0).expand(batch_size, -1, -1),
        )


##############################################################################
# mask prediction
##############################################################################
def predict_masks(queries: Tensor, pixel_embedding: Tensor, mask_embed: nn.Module) -> Tensor:
    """``[B, N, C]`` queries x ``[B, C, H, W]`` embeddings -> ``[B, N, H, W]`` logits."""
    return torch.einsum("bnc,bchw->bnhw", mask_embed(queries), pixel_embedding)


class PredictionHeads(nn.Module):
    def __init__(self, embed_dim: int, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.norm = nn.LayerNorm(embed_dim)
        self.class_embed = nn.Linear(embed_dim, num_classes + 1)
        self.mask_embed = MLP(embed_dim, embed_dim, embed_dim, 3)

    def forward(self, queries: Tensor, pixel_embedding: Tensor) -> DecoderStep:
        q = self.norm(queries)
        return DecoderStep(
            masks=MaskSet(predict_masks(q, pixel_embedding, self.mask_embed)),
            class_logits=self.class_embed(q),
        )


def attention_block_mask(
    mask_logits: Tensor,
    size: tuple[int, int],
    threshold: float = 0.5,
    frame: tuple[int, int] | None = None,
) -> Tensor:
    """
    Positions of a ``size`` map each query may not attend to: ``[B, N, h*w]``.

    Probabilities are resized bilinearly and compared against ``threshold``;
    a query with every position below it is left unmasked for this step.
    ``frame`` is the padded image size the ``size`` map covers; masks cover
    its top-left corner and are zero-extended to it before resizing.
    """
    probs = mask_logits.detach().sigmoid()
    if frame is not None:
        pad_h, pad_w = frame[0] - probs.shape[-2], frame[1] - probs.shape[-1]
        if pad_h < 0 or pad_w < 0:
            raise ShapeMismatchError(
                f"masks of size {tuple(probs.shape[-2:])} exceed the padded frame {tuple(frame)}"
            )
        probs = F.pad(probs, (0, pad_w, 0, pad_h), value=0.0)
    probs = F.interpolate(probs, size=size, mode="bilinear", align_corners=False)
    blocked = probs.flatten(2) < threshold
    all_blocked = blocked.all(dim=-1, keepdim=True)
    return blocked & ~all_blocked


##############################################################################
# decoder
##############################################################################
@dataclass(frozen=True)
class CrossAttentionResult:
    queries: Tensor
    weights: Tensor  # [B, heads, N, h*w]
    blocked: Tensor  # [B, N, h*w]


class DecoderLayer(nn.Module):
    """Pre-norm masked cross-attention, then query self-attention, then feed-forward."""

    def __init__(
        self,
        embed_dim: int,
        num_heads: int,
        ffn_dim: int,
        activation: str,
        mask_threshold: float = 0.5,
    ):
        super().__init__()
        self.mask_threshold = mask_threshold
        self.norm_cross = nn.LayerNorm(embed_dim)
        self.cross_attn = MultiHeadAttention(embed_dim, num_heads)
        self.norm_self = nn.LayerNorm(embed_dim)
        self.self_attn = MultiHeadAttention(embed_dim, num_heads)
        self.norm_ffn = nn.LayerNorm(embed_dim)
        self.ffn = FeedForward(embed_dim, ffn_dim, get_activation(activation))

    def forward(
        self,
        queries: Tensor,
        query_pos: Tensor,
        memory: Tensor,
        memory_pos: Tensor,
        prev_mask_logits: Tensor,
        frame: tuple[int, int] | None = None,
    ) -> CrossAttentionResult:
        """
        ``memory`` and ``memory_pos`` are ``[B or 1, C, h, w]`` maps;
        ``prev_mask_logits`` may have any spatial size. ``frame`` is the
        padded input size ``memory`` was computed from.
        """
        h, w = memory.shape[-2:]
        blocked = attention_block_mask(prev_mask_logits, (h, w), self.mask_threshold, frame)
        mem = memory.flatten(2).transpose(1, 2)
        mem_pos = memory_pos.flatten(2).transpose(1, 2)

        attended, weights = self.cross_attn(
            self.norm_cross(queries) + query_pos, mem + mem_pos, mem, blocked
        )
        x = queries + attended

        s = self.norm_self(x) + query_pos
        x = x + self.self_attn(s, s, self.norm_self(x))[0]
        x = x + self.ffn(self.norm_ffn(x))
        return CrossAttentionResult(queries=x, weights=weights, blocked=blocked)


def masked_cross_attention(
    queries: Tensor,
    query_pos: Tensor,
    memory: Tensor,
    memory_pos: Tensor,
    prev_mask_logits: Tensor,
    layer: DecoderLayer,
    frame: tuple[int, int] | None = None,
) -> CrossAttentionResult:
    return layer(queries, query_pos, memory, memory_pos, prev_mask_logits, frame)


class MaskedAttentionDecoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        embed_dim = config.embed_dim
        self.embed_dim = embed_dim
        self.num_levels = config.num_levels
        self.num_rounds = config.dec_rounds
        self.queries = QueryEmbeddings(config.num_queries, embed_dim)
        self.level_embed = nn.Embedding(config.num_levels, embed_dim)
        self.layers = nn.ModuleList(
            [
                DecoderLayer(
                    embed_dim,
                    config.num_heads,
                    config.ffn_dim,
                    config.activation,
                    config.mask_threshold,
                )
                for _ in range(config.num_levels * config.dec_rounds)
            ]
        )
        self.heads = PredictionHeads(embed_dim)

    def memory_encoding(self, level: int, memory: Tensor) -> Tensor:
        h, w = memory.shape[-2:]
        sine = sine_position_encoding(
            h, w, self.embed_dim, dtype=memory.dtype, device=memory.device
        )
        return (sine + self.level_embed.weight[level][:, None, None]).unsqueeze(0)

    def forward(
        self,
        encoded: EncodedPyramid,
        pixel_embedding: Tensor,
        frame: tuple[int, int] | None = None,
    ) -> DecoderOutput:
        """
        Runs R rounds of steps over D_L..D_1; the trace has L*R + 1 entries.
        ``frame`` is the padded input size when ``pixel_embedding`` was cropped.
        """
        queries, query_pos = self.queries.expand(pixel_embedding.shape[0])
        step = self.heads(queries, pixel_embedding)
        steps = [step]
        for r in range(self.num_rounds):
            for l in range(self.num_levels):
                level = self.num_levels - 1 - l
                memory = encoded[level]
                result = self.layers[r * self.num_levels + l](
                    queries,
                    query_pos,
                    memory,
                    self.memory_encoding(level, memory),
                    step.masks.logits,
                    frame,
                )
                queries = result.queries
                step = self.heads(queries, pixel_embedding)
                steps.append(step)
        return DecoderOutput(tuple(steps))


##############################################################################
# semantic aggregation
##############################################################################
def semantic_inference(
    mask_logits: Tensor, class_logits: Tensor, threshold: float = 0.5
) -> tuple[Tensor, Tensor]:
    """
    PV probability per pixel: sum over queries of p(PV | query) * mask prob.
    Returns ``(binary [B, H, W] uint8, probability [B, H, W])``.
    """
    pv_prob = class_logits.softmax(dim=-1)[..., PV_CLASS]
    prob = torch.einsum("bn,bnhw->bhw", pv_prob, mask_logits.sigmoid()).clamp(0.0, 1.0)
    return (prob >= threshold).to(torch.uint8), prob
