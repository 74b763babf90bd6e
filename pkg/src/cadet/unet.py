"""Text-conditioned noise-prediction U-Net with recordable cross-attention.

Layout (64x64 input): stem and one residual block at 64, two down blocks to
32 and 16, a bottleneck at 8, mirrored up path. Cross-attention runs at the
16x16 grids (two layers) and at 8x8 (bottleneck); mask generation consumes
only the 16x16 layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


def cross_attention(
    Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor,
    key_mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """attn(Q,K,V) = A V with A = softmax(Q K^T / sqrt(d)).

    Q: (..., m, d); K: (..., n, d); V: (..., n, dv). Returns (output, A)
    where every row of A sums to 1.
    """
    if Q.shape[-1] != K.shape[-1]:
        raise ValueError("query/key dims differ")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError("key/value counts differ")
    d = Q.shape[-1]
    logits = Q @ K.transpose(-1, -2) / math.sqrt(d)
    if key_mask is not None:
        logits = logits.masked_fill(key_mask[..., None, :], float("-inf"))
    A = logits.softmax(dim=-1)
    return A @ V, A


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1)
        ).to(t.device)
        ang = t.double()[:, None] * freqs[None]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttnBlock(nn.Module):
    """Pixels attend to text tokens; attention maps can be recorded."""

    def __init__(self, ch: int, cond_dim: int, heads: int = 2):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, ch)
        self.to_q = nn.Conv2d(ch, cond_dim, 1)
        self.to_k = nn.Linear(cond_dim, cond_dim)
        self.to_v = nn.Linear(cond_dim, cond_dim)
        self.proj = nn.Conv2d(cond_dim, ch, 1)

    def forward(
        self,
        x: torch.Tensor,
        cond: torch.Tensor,
        cond_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        B, C, h, w = x.shape
        nheads = self.heads
        d = self.to_k.out_features
        q = self.to_q(self.norm(x)).reshape(B, nheads, d // nheads, h * w).transpose(-1, -2)
        k = self.to_k(cond).reshape(B, -1, nheads, d // nheads).transpose(1, 2)
        v = self.to_v(cond).reshape(B, -1, nheads, d // nheads).transpose(1, 2)
        mask = cond_mask[:, None, :] if cond_mask is not None else None
        out, A = cross_attention(q, k, v, mask)
        out = out.transpose(-1, -2).reshape(B, d, h, w)
        return x + self.proj(out), A  # A: (B, heads, h*w, n)


@dataclass
class UNetConfig:
    in_channels: int = 3
    channels: tuple[int, int, int, int] = (16, 32, 64, 96)
    cond_dim: int = 64
    heads: int = 2
    temb_dim: int = 128


class AttentionStack:
    """Recorded cross-attention maps per timestep and layer.

    maps[t][layer] is a (B, heads, h*w, n) row-stochastic tensor; grid side
    lengths are tracked per layer.
    """

    def __init__(self, token_count: int = 0):
        self.maps: dict[int, dict[str, torch.Tensor]] = {}
        self.grids: dict[str, int] = {}
        self.token_count = token_count

    def record(self, t: int, layer_maps: dict[str, torch.Tensor], grids: dict[str, int]):
        self.maps[int(t)] = {k: v.detach() for k, v in layer_maps.items()}
        self.grids.update(grids)
        if layer_maps:
            self.token_count = next(iter(layer_maps.values())).shape[-1]

    @property
    def timesteps(self) -> list[int]:
        return sorted(self.maps)

    def layers_at_grid(self, t: int, grid: int) -> list[torch.Tensor]:
        return [m for name, m in self.maps[t].items() if self.grids[name] == grid]


class DiffusionModel(nn.Module):
    def __init__(self, config: UNetConfig | None = None):
        super().__init__()
        cfg = config or UNetConfig()
        self.config = cfg
        c1, c2, c3, c4 = cfg.channels
        td = cfg.temb_dim
        self.time_embed = SinusoidalTimeEmbedding(td)
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))

        self.stem = nn.Conv2d(cfg.in_channels, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, c1, td)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, c2, td)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.enc3 = ResBlock(c3, c3, td)
        self.attn_down16 = CrossAttnBlock(c3, cfg.cond_dim, cfg.heads)
        self.down3 = nn.Conv2d(c3, c4, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c4, c4, td)
        self.attn_mid8 = CrossAttnBlock(c4, cfg.cond_dim, cfg.heads)
        self.mid2 = ResBlock(c4, c4, td)
        self.up3 = nn.Conv2d(c4, c3, 1)
        self.dec3 = ResBlock(2 * c3, c3, td)
        self.attn_up16 = CrossAttnBlock(c3, cfg.cond_dim, cfg.heads)
        self.up2 = nn.Conv2d(c3, c2, 1)
        self.dec2 = ResBlock(2 * c2, c2, td)
        self.up1 = nn.Conv2d(c2, c1, 1)
        self.dec1 = ResBlock(2 * c1, c1, td)
        self.out_norm = nn.GroupNorm(8, c1)
        self.out_conv = nn.Conv2d(c1, cfg.in_channels, 3, padding=1)

    # Layers whose attention grids exist; 16x16 layers feed mask generation.
    ATTN_GRIDS = {"down16": 16, "mid8": 8, "up16": 16}

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor,
        cond: torch.Tensor,
        cond_mask: torch.Tensor | None = None,
        record: bool = False,
    ) -> tuple[torch.Tensor, dict[str, torch.Tensor] | None]:
        """Predict noise; optionally return this call's attention maps."""
        if t.ndim == 0:
            t = t[None].expand(x.shape[0])
        temb = self.time_mlp(self.time_embed(t).to(x.dtype))
        maps: dict[str, torch.Tensor] = {}

        h1 = self.enc1(self.stem(x), temb)
        h2 = self.enc2(self.down1(h1), temb)
        h3 = self.enc3(self.down2(h2), temb)
        h3, a = self.attn_down16(h3, cond, cond_mask)
        maps["down16"] = a
        m = self.down3(h3)
        m = self.mid1(m, temb)
        m, a = self.attn_mid8(m, cond, cond_mask)
        maps["mid8"] = a
        m = self.mid2(m, temb)
        u3 = self.up3(F.interpolate(m, scale_factor=2, mode="nearest"))
        u3 = self.dec3(torch.cat([u3, h3], dim=1), temb)
        u3, a = self.attn_up16(u3, cond, cond_mask)
        maps["up16"] = a
        u2 = self.up2(F.interpolate(u3, scale_factor=2, mode="nearest"))
        u2 = self.dec2(torch.cat([u2, h2], dim=1), temb)
        u1 = self.up1(F.interpolate(u2, scale_factor=2, mode="nearest"))
        u1 = self.dec1(torch.cat([u1, h1], dim=1), temb)
        eps = self.out_conv(F.silu(self.out_norm(u1)))
        return eps, (maps if record else None)


def predict_noise(
    model: DiffusionModel,
    x_t: torch.Tensor,
    t,
    cond: torch.Tensor,
    cond_mask: torch.Tensor | None = None,
    record: bool = False,
) -> tuple[torch.Tensor, AttentionStack | None]:
    """Single-call noise prediction; the stack holds this timestep's maps."""
    t = torch.as_tensor(t, dtype=torch.long, device=x_t.device)
    eps, maps = model(x_t, t, cond, cond_mask, record=record)
    stack = None
    if record:
        stack = AttentionStack()
        tval = int(t.reshape(-1)[0])
        stack.record(tval, maps, dict(model.ATTN_GRIDS))
    return eps, stack
