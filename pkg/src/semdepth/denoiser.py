"""Latent autoencoder and the conditional denoising U-Net.

The U-Net predicts noise from a noisy latent, a timestep and conditioning
tokens. Cross-attention sits at the coarsest resolution: queries come from the
spatial features, keys and values from the tokens. A learned per-slot
position embedding is added to the tokens before the key/value projections,
so token order matters. Each decoder stage is tapped, giving a feature
pyramid (finest level first) for the depth head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .diffusion_core import LatentState, NoiseSchedule, forward_noise_to
from .embedding import ConditioningTokens
from .errors import ValidationError
from .imageio import check_image


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class Autoencoder(nn.Module):
    """Image (3 x H x W in [0, 1]) <-> latent (C x H/f x W/f)."""

    def __init__(self, latent_channels: int = 4, downsample: int = 4, width: int = 32):
        super().__init__()
        n_down = int(round(math.log2(downsample)))
        if downsample < 2 or 2**n_down != downsample:
            raise ValidationError(f"downsample factor must be a power of two >= 2, got {downsample}")
        self.downsample = downsample
        self.latent_channels = latent_channels
        enc = [nn.Conv2d(3, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(width, latent_channels, 1)]
        dec = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(width, 3, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    def check_dims(self, h: int, w: int) -> None:
        f = self.downsample
        if h % f or w % f:
            raise ValidationError(f"image size {h}x{w} not divisible by downsample factor {f}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self.check_dims(*x.shape[-2:])
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(z)).clamp(0.0, 1.0)

    def forward(self, x):
        return self.decode(self.encode(x))


def image_to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    arr = check_image(img)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(dtype)[None]


def encode_image(img, ae: Autoencoder) -> LatentState:
    x = image_to_tensor(img, next(ae.parameters()).dtype)
    with torch.no_grad():
        z = ae.encode(x)[0]
    return LatentState(z, 0)


def decode_latent(z: LatentState, ae: Autoencoder) -> np.ndarray:
    values = torch.as_tensor(z.values, dtype=next(ae.parameters()).dtype)
    with torch.no_grad():
        img = ae.decode(values[None])[0]
    return img.permute(1, 2, 0).double().numpy()


def timestep_features(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of integer timesteps, shape (batch, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, t_emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, token_dim: int, num_tokens: int, heads: int = 4):
        super().__init__()
        if token_dim % heads:
            raise ValidationError(f"token_dim {token_dim} not divisible by {heads} heads")
        self.heads = heads
        self.token_dim = token_dim
        self.num_tokens = num_tokens
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.q = nn.Linear(channels, token_dim)
        self.k = nn.Linear(token_dim, token_dim)
        self.v = nn.Linear(token_dim, token_dim)
        self.out = nn.Linear(token_dim, channels)
        self.pos = nn.Parameter(0.5 * torch.randn(num_tokens, token_dim))

    def forward(self, x, tokens):
        b, c, h, w = x.shape
        if tokens.shape[-2:] != (self.num_tokens, self.token_dim):
            raise ValidationError(
                f"conditioning tokens {tuple(tokens.shape[-2:])} do not match attention "
                f"({self.num_tokens}, {self.token_dim})"
            )
        q = self.q(self.norm(x).flatten(2).transpose(1, 2))  # b, hw, d
        ctx = tokens + self.pos
        k, v = self.k(ctx), self.v(ctx)
        dh = self.token_dim // self.heads

        def split(t):
            return t.reshape(b, -1, self.heads, dh).transpose(1, 2)

        att = torch.softmax(split(q) @ split(k).transpose(-1, -2) / math.sqrt(dh), dim=-1)
        o = (att @ split(v)).transpose(1, 2).reshape(b, h * w, self.token_dim)
        return x + self.out(o).transpose(1, 2).reshape(b, c, h, w)


@dataclass
class FeaturePyramid:
    levels: list  # tensors (batch, C_i, H_i, W_i), finest first

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ValidationError("a feature pyramid needs at least two levels")
        for fine, coarse in zip(self.levels, self.levels[1:]):
            if tuple(fine.shape[-2:]) != (2 * coarse.shape[-2], 2 * coarse.shape[-1]):
                raise ValidationError("pyramid resolutions must halve level to level")

    @property
    def resolutions(self):
        return [tuple(l.shape[-2:]) for l in self.levels]

    @property
    def channels(self):
        return [int(l.shape[1]) for l in self.levels]


class UNet(nn.Module):
    def __init__(
        self,
        latent_channels: int = 4,
        base_width: int = 32,
        levels: int = 2,
        token_dim: int = 32,
        num_tokens: int = 4,
        num_steps: int = 50,
        heads: int = 4,
    ):
        super().__init__()
        if levels < 2:
            raise ValidationError("the U-Net needs at least two resolution levels")
        self.levels = levels
        self.num_steps = num_steps
        self.token_dim = token_dim
        self.t_feat = base_width
        t_dim = 2 * base_width
        self.t_mlp = nn.Sequential(nn.Linear(base_width, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        chs = [base_width * min(2**i, 2) for i in range(levels)]
        self.chs = chs
        self.conv_in = nn.Conv2d(latent_channels, chs[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        for i in range(levels):
            self.down_blocks.append(ResBlock(chs[max(i - 1, 0)] if i else chs[0], chs[i], t_dim))
            if i < levels - 1:
                self.downsamplers.append(nn.Conv2d(chs[i], chs[i], 3, stride=2, padding=1))
        self.mid1 = ResBlock(chs[-1], chs[-1], t_dim)
        self.attn = CrossAttention(chs[-1], token_dim, num_tokens, heads)
        self.mid2 = ResBlock(chs[-1], chs[-1], t_dim)
        self.up_blocks = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(levels)):
            self.up_blocks.append(ResBlock(chs[i] * 2, chs[i], t_dim))
            if i > 0:
                self.upsamplers.append(nn.Conv2d(chs[i], chs[i - 1], 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(chs[0]), chs[0])
        self.conv_out = nn.Conv2d(chs[0], latent_channels, 3, padding=1)

    @property
    def feature_channels(self) -> list:
        return list(self.chs)

    def forward(self, z, t, tokens):
        """Returns (eps_hat, FeaturePyramid); ``t`` is an int or (batch,) tensor."""
        b = z.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), dtype=torch.long)
        if torch.any(t < 1) or torch.any(t > self.num_steps):
            raise ValidationError(f"timestep outside [1, {self.num_steps}]")
        if tokens.shape[-1] != self.token_dim:
            raise ValidationError(f"token width {tokens.shape[-1]} != attention width {self.token_dim}")
        if tokens.dim() == 2:
            tokens = tokens.expand(b, *tokens.shape)
        f = 2 ** (self.levels - 1)
        if z.shape[-1] % f or z.shape[-2] % f:
            raise ValidationError(f"latent size {tuple(z.shape[-2:])} not divisible by {f}")
        t_emb = self.t_mlp(timestep_features(t, self.t_feat).to(z.dtype))
        h = self.conv_in(z)
        skips = []
        for i, block in enumerate(self.down_blocks):
            h = block(h, t_emb)
            skips.append(h)
            if i < self.levels - 1:
                h = self.downsamplers[i](h)
        h = self.mid1(h, t_emb)
        h = self.attn(h, tokens)
        h = self.mid2(h, t_emb)
        taps = []
        for j, block in enumerate(self.up_blocks):
            h = block(torch.cat([h, skips.pop()], dim=1), t_emb)
            taps.append(h)
            if j < self.levels - 1:
                h = self.upsamplers[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        eps = self.conv_out(F.silu(self.norm_out(h)))
        return eps, FeaturePyramid(taps[::-1])


def _tokens_tensor(cond, dtype):
    tokens = cond.tokens if isinstance(cond, ConditioningTokens) else cond
    return torch.as_tensor(tokens, dtype=dtype)


def predict_noise(z: LatentState, t: int, cond, unet: UNet):
    """Single-sample noise prediction; returns (eps_hat with z's shape, pyramid)."""
    dtype = next(unet.parameters()).dtype
    values = torch.as_tensor(z.values, dtype=dtype)
    eps, pyr = unet(values[None], t, _tokens_tensor(cond, dtype))
    return eps[0], pyr


def extract_features(img, t: int, cond, ae: Autoencoder, unet: UNet, schedule: NoiseSchedule, noise):
    """encode -> closed-form noising to timestep t -> U-Net; returns the pyramid."""
    z0 = encode_image(img, ae)
    zt = forward_noise_to(z0, t, schedule, torch.as_tensor(noise, dtype=z0.values.dtype))
    _, pyr = predict_noise(zt, t, cond, unet)
    return pyr
