"""Shared neural blocks: attention, MLPs, norms, sinusoidal position features."""

from __future__ import annotations

import math

import torch
from torch import nn

from ..errors import ConfigurationError


def sincos_features(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos features for (possibly fractional) 1-D positions.

    Uses the classic geometric frequency ladder; ``pos`` is expressed in grid
    units so a prompt point and the grid cell containing it receive nearby
    encodings.
    """
    if dim % 2 != 0:
        raise ConfigurationError("sincos feature dim must be even")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
    )
    angles = pos.float().unsqueeze(-1) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def point_position_encoding(xy: torch.Tensor, dim: int, patch_size: int) -> torch.Tensor:
    """Encode canvas-pixel (x, y) coordinates into ``dim`` channels.

    Half the channels encode y, half x, both measured in grid units.
    """
    if dim % 4 != 0:
        raise ConfigurationError("position encoding dim must be divisible by 4")
    gy = sincos_features(xy[..., 1] / patch_size, dim // 2)
    gx = sincos_features(xy[..., 0] / patch_size, dim // 2)
    return torch.cat([gy, gx], dim=-1)


def grid_position_encoding(h: int, w: int, dim: int) -> torch.Tensor:
    """Fixed sinusoidal encoding of a (h, w) grid; returns [dim, h, w].

    Cell centers sit at index + 0.5 so they align with
    :func:`point_position_encoding` applied to canvas pixels.
    """
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=torch.float32) + 0.5,
        torch.arange(w, dtype=torch.float32) + 0.5,
        indexing="ij",
    )
    gy = sincos_features(ys, dim // 2)
    gx = sincos_features(xs, dim // 2)
    return torch.cat([gy, gx], dim=-1).permute(2, 0, 1)


class LayerNorm2d(nn.Module):
    """Channel-wise LayerNorm for [B, C, H, W] tensors."""

    def __init__(self, num_channels: int, eps: float = 1e-6) -> None:
        super().__init__()
        self.weight = nn.Parameter(torch.ones(num_channels))
        self.bias = nn.Parameter(torch.zeros(num_channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class MLPBlock(nn.Module):
    """Two-layer GELU MLP used inside transformer blocks."""

    def __init__(self, dim: int, hidden_dim: int) -> None:
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden_dim)
        self.lin2 = nn.Linear(hidden_dim, dim)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.lin2(self.act(self.lin1(x)))


class MLP(nn.Module):
    """Plain ReLU MLP (used by the per-mask hypernetworks)."""

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, num_layers: int) -> None:
        super().__init__()
        dims = [input_dim] + [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(
            nn.Linear(din, dout) for din, dout in zip(dims, dims[1:] + [output_dim])
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class Attention(nn.Module):
    """Multi-head attention over token sets with separate q/k/v projections.

    ``downsample_rate`` shrinks the internal width (the decoder uses rate 2
    for its cross-attentions); 1 keeps full width. The separate q/v linear
    layers are the injection points for low-rank adapters.
    """

    def __init__(self, dim: int, num_heads: int, downsample_rate: int = 1) -> None:
        super().__init__()
        internal = dim // downsample_rate
        if internal % num_heads != 0:
            raise ConfigurationError("attention internal width must divide across heads")
        self.num_heads = num_heads
        self.internal_dim = internal
        self.q_proj = nn.Linear(dim, internal)
        self.k_proj = nn.Linear(dim, internal)
        self.v_proj = nn.Linear(dim, internal)
        self.out_proj = nn.Linear(internal, dim)

    def _split_heads(self, x: torch.Tensor) -> torch.Tensor:
        n, _ = x.shape
        return x.view(n, self.num_heads, self.internal_dim // self.num_heads).transpose(0, 1)

    def forward(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
        """Attend queries [nq, dim] over keys/values [nk, dim] -> [nq, dim]."""
        nq = q.shape[0]
        qh = self._split_heads(self.q_proj(q))
        kh = self._split_heads(self.k_proj(k))
        vh = self._split_heads(self.v_proj(v))
        scale = 1.0 / math.sqrt(qh.shape[-1])
        attn = torch.softmax(qh @ kh.transpose(-2, -1) * scale, dim=-1)
        out = (attn @ vh).transpose(0, 1).reshape(nq, self.internal_dim)
        return self.out_proj(out)
