"""Condition encoder, VQ bottleneck, condition decoder and auxiliary heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DENOISER_STRIDE, ConfigError, RangeError, TokenGrid
from .features import cosine_distance


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class AttnBlock(nn.Module):
    """Single-head spatial self-attention."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).transpose(-1, -2).unbind(1)
        out = F.scaled_dot_product_attention(q.unsqueeze(1), k.unsqueeze(1), v.unsqueeze(1)).squeeze(1)
        return x + self.proj(out.transpose(-1, -2).reshape(b, c, h, w))


def _stage(ch: int, num_res_blocks: int, attn: bool) -> nn.Sequential:
    layers = [ResBlock(ch) for _ in range(num_res_blocks)]
    if attn:
        layers.append(AttnBlock(ch))
    return nn.Sequential(*layers)


class ConditionEncoder(nn.Module):
    """Maps images (B, C, H, W) in [-1, 1] to pre-quantisation latents (B, d_code, H/f, W/f).

    A strided stem takes the first factor of two; every further factor is a
    stage of residual blocks followed by a strided convolution. Attention sits
    at the two lowest resolutions.
    """

    def __init__(self, downsample_factor: int, d_code: int = 8, width: int = 64,
                 num_res_blocks: int = 4, in_channels: int = 3):
        super().__init__()
        n = int(math.log2(downsample_factor))
        if 2 ** n != downsample_factor or n < 1:
            raise ConfigError(f"downsample factor {downsample_factor} is not a power of two >= 2")
        self.downsample_factor = downsample_factor
        self.stem = nn.Conv2d(in_channels, width, 4, stride=2, padding=1)
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(1, n):
            self.stages.append(_stage(width, num_res_blocks, attn=(i == n - 1)))
            self.downs.append(nn.Conv2d(width, width, 4, stride=2, padding=1))
        self.mid = _stage(width, 1, attn=True)
        self.norm_out = nn.GroupNorm(_groups(width), width)
        self.conv_out = nn.Conv2d(width, d_code, 1)

    def forward(self, x):
        f = self.downsample_factor
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ConfigError(f"image {tuple(x.shape[-2:])} not divisible by f={f}")
        h = self.stem(x)
        for stage, down in zip(self.stages, self.downs):
            h = down(stage(h))
        h = self.mid(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class ConditionDecoder(nn.Module):
    """Maps quantised latents at 1/f to the dense condition at 1/16."""

    def __init__(self, downsample_factor: int, d_code: int = 8, d_cond: int = 64,
                 width: int = 64, num_res_blocks: int = 4):
        super().__init__()
        self.downsample_factor = downsample_factor
        self.conv_in = nn.Conv2d(d_code, width, 3, padding=1)
        self.mid = _stage(width, 1, attn=True)
        self.resample = nn.ModuleList()
        if downsample_factor >= DENOISER_STRIDE:
            n_up = int(math.log2(downsample_factor // DENOISER_STRIDE))
            for i in range(n_up):
                self.resample.append(nn.ModuleDict({
                    "blocks": _stage(width, num_res_blocks, attn=(i == 0)),
                    "conv": nn.Conv2d(width, width, 3, padding=1),
                }))
            self._mode = "up"
        else:
            n_down = int(math.log2(DENOISER_STRIDE // downsample_factor))
            for _ in range(n_down):
                self.resample.append(nn.ModuleDict({
                    "blocks": _stage(width, num_res_blocks, attn=False),
                    "conv": nn.Conv2d(width, width, 4, stride=2, padding=1),
                }))
            self._mode = "down"
        self.out_blocks = _stage(width, num_res_blocks, attn=False)
        self.norm_out = nn.GroupNorm(_groups(width), width)
        self.conv_out = nn.Conv2d(width, d_cond, 3, padding=1)

    def forward(self, z_q):
        h = self.mid(self.conv_in(z_q))
        for layer in self.resample:
            h = layer["blocks"](h)
            if self._mode == "up":
                h = F.interpolate(h, scale_factor=2.0, mode="nearest")
            h = layer["conv"](h)
        h = self.out_blocks(h)
        return self.conv_out(F.silu(self.norm_out(h)))


# --------------------------------------------------------------------------- VQ


def nearest_codes(z, codebook):
    """Index of the nearest codebook row for each row of ``z`` (squared Euclidean).

    z: (M, d), codebook: (N, d). Distances are formed as explicit differences
    rather than the expanded dot-product form so near ties resolve exactly like
    a brute-force search would.
    """
    if codebook.shape[0] == 0:
        raise ConfigError("empty codebook")
    if z.shape[-1] != codebook.shape[-1]:
        raise ConfigError(f"code dim {z.shape[-1]} != codebook dim {codebook.shape[-1]}")
    out = torch.empty(z.shape[0], dtype=torch.long, device=z.device)
    chunk = max(1, (1 << 22) // max(1, codebook.numel()))
    for s in range(0, z.shape[0], chunk):
        d = ((z[s:s + chunk, None, :] - codebook[None]) ** 2).sum(-1)
        out[s:s + chunk] = d.argmin(-1)
    return out


@dataclass
class QuantizeResult:
    indices: torch.Tensor  # (B, h, w) long
    z_q: torch.Tensor  # straight-through quantised latents (B, d, h, w)
    commitment_loss: torch.Tensor
    codebook_loss: torch.Tensor
    commit_loss: torch.Tensor

    def grids(self) -> list[TokenGrid]:
        return [TokenGrid(i.cpu().numpy()) for i in self.indices]


def quantize(z_e, codebook) -> QuantizeResult:
    """Nearest-neighbour quantisation with a straight-through gradient to ``z_e``.

    The returned commitment loss is ||sg[z_e] - e||^2 + ||z_e - sg[e]||^2; the
    usual 0.25 encoder weight is applied by the caller's beta.
    """
    b, d, h, w = z_e.shape
    flat = z_e.permute(0, 2, 3, 1).reshape(-1, d)
    with torch.no_grad():
        idx = nearest_codes(flat.detach(), codebook.detach())
    zq = codebook[idx].reshape(b, h, w, d).permute(0, 3, 1, 2)
    codebook_loss = F.mse_loss(zq, z_e.detach())
    commit_loss = F.mse_loss(z_e, zq.detach())
    # value is exactly the codebook entry; gradient is the identity to z_e
    z_q_st = zq.detach() + (z_e - z_e.detach())
    return QuantizeResult(idx.reshape(b, h, w), z_q_st, codebook_loss + commit_loss,
                          codebook_loss, commit_loss)


def dequantize(indices, codebook):
    """Table lookup. ``indices`` is a (B, h, w) tensor, a TokenGrid or a list of grids."""
    if isinstance(indices, TokenGrid):
        indices = torch.as_tensor(indices.indices)[None]
    elif isinstance(indices, (list, tuple)):
        indices = torch.stack([torch.as_tensor(g.indices) for g in indices])
    indices = torch.as_tensor(indices, dtype=torch.long, device=codebook.device)
    n = codebook.shape[0]
    if indices.numel() and (indices.min() < 0 or indices.max() >= n):
        raise RangeError(f"token index outside [0, {n})")
    return codebook[indices].permute(0, 3, 1, 2)


class VectorQuantizer(nn.Module):
    """Codebook with EMA updates and re-seeding of entries that go unused.

    Training mutates buffers; callers must serialise ``update`` calls.
    """

    def __init__(self, codebook_size: int, d_code: int = 8, decay: float = 0.99,
                 dead_after: int = 256, eps: float = 1e-5):
        super().__init__()
        self.codebook_size = codebook_size
        self.d_code = d_code
        self.decay = decay
        self.dead_after = dead_after
        self.eps = eps
        self.register_buffer("embedding", torch.randn(codebook_size, d_code))
        self.register_buffer("ema_count", torch.ones(codebook_size))
        self.register_buffer("ema_sum", self.embedding.clone())
        self.register_buffer("usage_counts", torch.zeros(codebook_size, dtype=torch.long))
        self.register_buffer("idle_steps", torch.zeros(codebook_size, dtype=torch.long))
        self.register_buffer("initialized", torch.tensor(False))

    def forward(self, z_e) -> QuantizeResult:
        return quantize(z_e, self.embedding)

    def dequantize(self, indices):
        return dequantize(indices, self.embedding)

    @torch.no_grad()
    def update(self, z_e, indices, generator: Optional[torch.Generator] = None) -> None:
        flat = z_e.detach().permute(0, 2, 3, 1).reshape(-1, self.d_code).float()
        idx = indices.reshape(-1)
        if not bool(self.initialized):
            pick = torch.randint(0, flat.shape[0], (self.codebook_size,), generator=generator)
            self.embedding.copy_(flat[pick] + 1e-3 * torch.randn(self.embedding.shape, generator=generator))
            self.ema_sum.copy_(self.embedding)
            self.ema_count.fill_(1.0)
            self.initialized.fill_(True)
            idx = nearest_codes(flat, self.embedding)
        onehot = F.one_hot(idx, self.codebook_size).to(flat.dtype)
        counts = onehot.sum(0)
        self.usage_counts += counts.long()
        self.ema_count.mul_(self.decay).add_(counts, alpha=1 - self.decay)
        self.ema_sum.mul_(self.decay).add_(onehot.t() @ flat, alpha=1 - self.decay)
        total = self.ema_count.sum()
        smoothed = (self.ema_count + self.eps) / (total + self.codebook_size * self.eps) * total
        self.embedding.copy_(self.ema_sum / smoothed[:, None])

        used = counts > 0
        self.idle_steps[used] = 0
        self.idle_steps[~used] += 1
        dead = (self.idle_steps >= self.dead_after).nonzero().flatten()
        if len(dead):
            pick = torch.randint(0, flat.shape[0], (len(dead),), generator=generator)
            fresh = flat[pick] + 1e-3 * torch.randn(len(dead), self.d_code, generator=generator)
            self.embedding[dead] = fresh
            self.ema_sum[dead] = fresh
            self.ema_count[dead] = 1.0
            self.idle_steps[dead] = 0


# ------------------------------------------------------------------- aux heads


@dataclass
class AuxPrediction:
    pixel_recon: torch.Tensor
    feature_pred: torch.Tensor


@dataclass
class AuxLoss:
    mse: torch.Tensor
    feature: Optional[torch.Tensor]  # None when no extractor was supplied
    total: torch.Tensor

    @property
    def feature_skipped(self) -> bool:
        return self.feature is None


def _three_layer(cin, width, cout, final_kernel=1):
    return nn.Sequential(
        nn.Conv2d(cin, width, 3, padding=1), nn.GELU(),
        nn.Conv2d(width, width, 3, padding=1), nn.GELU(),
        nn.Conv2d(width, cout, final_kernel),
    )


class AuxHeads(nn.Module):
    """Lightweight heads reconstructing pixels and extractor features from the condition."""

    def __init__(self, d_cond: int, feature_dim: int = 64, width: int = 64, out_channels: int = 3):
        super().__init__()
        self.out_channels = out_channels
        self.pixel = _three_layer(d_cond, width, out_channels * DENOISER_STRIDE ** 2)
        self.feature = _three_layer(d_cond, width, feature_dim)

    def forward(self, c) -> AuxPrediction:
        return AuxPrediction(F.pixel_shuffle(self.pixel(c), DENOISER_STRIDE), self.feature(c))


def aux_loss(pred: AuxPrediction, image, target_features=None, feature_weight: float = 0.5) -> AuxLoss:
    if pred.pixel_recon.shape != image.shape:
        raise ConfigError(f"pixel head output {tuple(pred.pixel_recon.shape)} != image {tuple(image.shape)}")
    mse = F.mse_loss(pred.pixel_recon, image)
    if target_features is None:
        return AuxLoss(mse, None, mse)
    feat = cosine_distance(pred.feature_pred, target_features)
    return AuxLoss(mse, feat, mse + feature_weight * feat)


def aux_heads(heads: AuxHeads, c, image, target_features=None):
    pred = heads(c)
    return pred, aux_loss(pred, image, target_features)


class Conditioner(nn.Module):
    """Encoder, codebook and decoder for one operating point."""

    def __init__(self, downsample_factor: int, codebook_size: int, d_code: int = 8, d_cond: int = 64,
                 width: int = 64, num_res_blocks: int = 4, in_channels: int = 3):
        super().__init__()
        self.downsample_factor = downsample_factor
        self.encoder = ConditionEncoder(downsample_factor, d_code, width, num_res_blocks, in_channels)
        self.quantizer = VectorQuantizer(codebook_size, d_code)
        self.decoder = ConditionDecoder(downsample_factor, d_code, d_cond, width, num_res_blocks)

    def encode(self, image) -> QuantizeResult:
        return self.quantizer(self.encoder(image))

    def decode_tokens(self, indices):
        return self.decoder(self.quantizer.dequantize(indices))

