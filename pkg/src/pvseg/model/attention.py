import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from pvseg.errors import ConfigError


class MultiHeadAttention(nn.Module):
    """
    Scaled dot-product attention over ``num_heads`` heads that also returns
    its post-softmax weights.

    ``blocked`` is a boolean ``[B, Lq, Lk]`` tensor, ``True`` where the query
    must not look. Blocked logits are set to ``-inf`` so their weight is
    exactly zero; callers guarantee at least one open key per row.
    """

    def __init__(self, embed_dim: int, num_heads: int, bias: bool = True):
        super().__init__()
        if embed_dim % num_heads != 0:
            raise ConfigError(
                f"embedding dim {embed_dim} is not divisible by {num_heads} heads"
            )
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.scale = 1.0 / math.sqrt(self.head_dim)

        self.q_proj = nn.Linear(embed_dim, embed_dim, bias=bias)
        self.k_proj = nn.Linear(embed_dim, embed_dim, bias=bias)
        self.v_proj = nn.Linear(embed_dim, embed_dim, bias=bias)
        self.out_proj = nn.Linear(embed_dim, embed_dim, bias=bias)
        self._reset_parameters()

    def _reset_parameters(self):
        for proj in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            nn.init.xavier_uniform_(proj.weight)
            if proj.bias is not None:
                nn.init.zeros_(proj.bias)

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: Tensor,
        key: Tensor,
        value: Tensor,
        blocked: Tensor | None = None,
    ) -> tuple[Tensor, Tensor]:
        b, lq, _ = query.shape
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))

        logits = torch.matmul(q, k.transpose(-2, -1)) * self.scale
        if blocked is not None:
            logits = logits.masked_fill(blocked[:, None, :, :], float("-inf"))
        weights = F.softmax(logits, dim=-1)

        out = torch.matmul(weights, v).transpose(1, 2).reshape(b, lq, self.embed_dim)
        return self.out_proj(out), weights


class FeedForward(nn.Module):
    def __init__(self, embed_dim: int, hidden_dim: int, activation: nn.Module):
        super().__init__()
        self.linear1 = nn.Linear(embed_dim, hidden_dim)
        self.activation = activation
        self.linear2 = nn.Linear(hidden_dim, embed_dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear2(self.activation(self.linear1(x)))
