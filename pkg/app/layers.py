from typing import Optional

import torch
from torch import nn


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, dim),
        )

    def forward(self, x):
        return self.net(x)


class Adapter(nn.Module):
    """Residual bottleneck; the up-projection starts at zero so a fresh adapter is the identity"""

    def __init__(self, dim: int, rank: int):
        super().__init__()
        self.down = nn.Linear(dim, rank)
        self.up = nn.Linear(rank, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return x + self.up(torch.relu(self.down(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with an optional adapter on its output"""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads=heads, batch_first=True)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, dim * mlp_ratio)
        self.adapter: Optional[Adapter] = None

    def add_adapter(self, rank: int) -> Adapter:
        self.adapter = Adapter(self.attn.embed_dim, rank)
        return self.adapter

    def forward(self, x, padding_mask: Optional[torch.Tensor] = None):
        h = self.attn_norm(x)
        attended, _ = self.attn(h, h, h, key_padding_mask=padding_mask, need_weights=False)
        x = x + attended
        x = x + self.ff(self.ff_norm(x))
        if self.adapter is not None:
            x = self.adapter(x)
        return x
