"""Conditional latent UNet with an instrumented decoder.

The decoder is a flat stack of 12 blocks (indices 0..11, forward-execution
order), each block = residual conv -> self-attention -> decoupled
cross-attention. Instrumentation is a first-class port: blocks route their
residual output (``f``) and self-attention queries/keys through an optional
``taps`` object, which may record them or substitute stored tensors. A null
taps port returns its inputs untouched, so an uninstrumented pass and a
pass with inactive taps are bitwise identical.

Cross-attention is decoupled: text tokens and image tokens attend through
separate key/value projections sharing one query, and their outputs add.

Weights are deterministically seeded (or loaded from a weights directory),
and a small designed bias path adds a channel offset derived from the mean
conditioning token, so conditioning steers global appearance even without
trained weights.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..clipspace import HIDDEN_DIM, seeded_generator

LATENT_CHANNELS = 4
NUM_DECODER_LAYERS = 12
TIME_DIM = 128
EPS_SCALE = 0.1
MAX_TIME_FREQ = 16.0  # cycles over the whole schedule; keeps d(eps)/dt small


def timestep_embedding(t: int, dim: int = TIME_DIM, train_steps: int = 1000) -> torch.Tensor:
    """Low-frequency sinusoidal embedding of t/train_steps.

    Restricting to slow frequencies keeps the noise prediction smooth along
    the schedule, which is what makes first-order DDIM inversion tight.
    """
    half = dim // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(MAX_TIME_FREQ), half)
    ) * (2.0 * math.pi)
    args = (float(t) / train_steps) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)])


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int = TIME_DIM):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    """Spatial self-attention over flattened positions with a q/k tap point."""

    def __init__(self, ch: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(8, ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k = nn.Linear(ch, ch, bias=False)
        self.to_v = nn.Linear(ch, ch, bias=False)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, x: torch.Tensor, taps=None, layer_idx: int | None = None) -> torch.Tensor:
        b, c, hh, ww = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)  # (B, HW, C)
        q, k, v = self.to_q(seq), self.to_k(seq), self.to_v(seq)
        if taps is not None:
            q, k = taps.qk(layer_idx, q, k)
        d = c // self.heads

        def split(t):
            return t.view(b, -1, self.heads, d).transpose(1, 2)

        attn = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (attn @ split(v)).transpose(1, 2).reshape(b, -1, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, hh, ww)
        return x + out


class DecoupledCrossAttention(nn.Module):
    """Shared query attends to text and image tokens through separate K/V."""

    def __init__(self, ch: int, ctx_dim: int = HIDDEN_DIM, heads: int = 4, image_scale: float = 1.0):
        super().__init__()
        self.heads = heads
        self.image_scale = image_scale
        self.norm = nn.GroupNorm(8, ch)
        self.to_q = nn.Linear(ch, ch, bias=False)
        self.to_k_text = nn.Linear(ctx_dim, ch, bias=False)
        self.to_v_text = nn.Linear(ctx_dim, ch, bias=False)
        self.to_k_image = nn.Linear(ctx_dim, ch, bias=False)
        self.to_v_image = nn.Linear(ctx_dim, ch, bias=False)
        self.to_out = nn.Linear(ch, ch)

    def _attend(self, q, k, v, b, c):
        d = c // self.heads

        def split(t):
            return t.view(b, -1, self.heads, d).transpose(1, 2)

        attn = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(d), dim=-1)
        return (attn @ split(v)).transpose(1, 2).reshape(b, -1, c)

    def forward(self, x: torch.Tensor, text_ctx: torch.Tensor, image_ctx: torch.Tensor) -> torch.Tensor:
        b, c, hh, ww = x.shape
        seq = self.norm(x).flatten(2).transpose(1, 2)
        q = self.to_q(seq)
        out = self._attend(q, self.to_k_text(text_ctx), self.to_v_text(text_ctx), b, c)
        out = out + self.image_scale * self._attend(
            q, self.to_k_image(image_ctx), self.to_v_image(image_ctx), b, c
        )
        out = self.to_out(out).transpose(1, 2).reshape(b, c, hh, ww)
        return x + out


class DecoderBlock(nn.Module):
    def __init__(self, cin: int, cout: int, heads: int = 4):
        super().__init__()
        self.res = ResBlock(cin, cout)
        self.self_attn = SelfAttention(cout, heads)
        self.cross_attn = DecoupledCrossAttention(cout, heads=heads)

    def forward(self, h, emb, text_ctx, image_ctx, taps=None, idx: int | None = None):
        f = self.res(h, emb)
        if taps is not None:
            f = taps.feature(idx, f)
        h = self.self_attn(f, taps, idx)
        return self.cross_attn(h, text_ctx, image_ctx)


class CondUNet(nn.Module):
    """Noise predictor over 4x64x64 latents, conditioned on 77+4 tokens."""

    def __init__(self, seed: int = 404):
        super().__init__()
        c0, c1, c2, c3 = 16, 24, 32, 48
        self.time_mlp = nn.Sequential(nn.Linear(TIME_DIM, TIME_DIM), nn.SiLU(), nn.Linear(TIME_DIM, TIME_DIM))
        self.stem = nn.Conv2d(LATENT_CHANNELS, c0, 3, padding=1)
        self.enc1 = ResBlock(c0, c0)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c1, c1)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc3 = ResBlock(c2, c2)
        self.down3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c3, c3)
        self.mid_attn = SelfAttention(c3)
        self.mid_cross = DecoupledCrossAttention(c3)
        self.mid2 = ResBlock(c3, c3)
        # Decoder: 6 blocks at 8x8, 6 at 16x16 -> indices 0..11.
        blocks = [DecoderBlock(c3, c3) for _ in range(6)]
        blocks += [DecoderBlock(c3 + c2 if i == 0 else c2, c2) for i in range(6)]
        self.decoder = nn.ModuleList(blocks)
        self.up1 = nn.Conv2d(c3, c3, 3, padding=1)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.mix32 = ResBlock(c1 + c1, c1)
        self.up3 = nn.Conv2d(c1, c0, 3, padding=1)
        self.out_res = ResBlock(c0 + c0, c0)
        self.out_norm = nn.GroupNorm(8, c0)
        self.out_conv = nn.Conv2d(c0, LATENT_CHANNELS, 3, padding=1)
        self._init_weights(seed)
        self.eval()
        self.requires_grad_(False)

    def _init_weights(self, seed: int) -> None:
        g = seeded_generator(seed)
        with torch.no_grad():
            for name, m in self.named_modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    std = (1.0 / fan_in) ** 0.5
                    if name.endswith(("conv2", "to_out", "out_conv")):
                        std *= 0.5  # keep the predicted noise modest for tight inversion
                    if name.endswith(("to_k_text", "to_v_text")):
                        std *= 0.25  # conditioning nudges, the steering path leads
                    if name.endswith(("to_k_image", "to_v_image")):
                        std *= 0.05  # image tokens act mostly through the steering path
                    m.weight.normal_(0.0, std, generator=g)
                    if m.bias is not None:
                        m.bias.zero_()

    @property
    def num_decoder_layers(self) -> int:
        return len(self.decoder)

    @torch.no_grad()
    def forward(
        self,
        x: torch.Tensor,
        t: int,
        text_ctx: torch.Tensor,
        image_ctx: torch.Tensor,
        taps=None,
    ) -> torch.Tensor:
        b = x.shape[0]
        emb = self.time_mlp(timestep_embedding(t).unsqueeze(0)).expand(b, -1)
        h = self.stem(x)
        s64 = self.enc1(h, emb)
        s32 = self.enc2(self.down1(s64), emb)
        s16 = self.enc3(self.down2(s32), emb)
        h = self.down3(s16)
        h = self.mid1(h, emb)
        h = self.mid_attn(h)
        h = self.mid_cross(h, text_ctx, image_ctx)
        h = self.mid2(h, emb)
        for idx, block in enumerate(self.decoder):
            if idx == 6:
                h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
                h = torch.cat([h, s16], dim=1)
            h = block(h, emb, text_ctx, image_ctx, taps=taps, idx=idx)
        h = self.up2(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.mix32(torch.cat([h, s32], dim=1), emb)
        h = self.up3(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.out_res(torch.cat([h, s64], dim=1), emb)
        return self.out_conv(F.silu(self.out_norm(h))) * EPS_SCALE
