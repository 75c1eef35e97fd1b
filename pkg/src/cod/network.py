"""Conditional denoiser: DiT backbone with AdaLN-Zero, a decoupled head, and t=0 folding.

The condition enters only by channel concatenation with the patchified noisy
input; AdaLN modulation depends on the timestep alone, which is what makes the
one-step fold exact.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, StateError

PIXEL_PATCH = 16
LATENT_PATCH = 2


def patchify(x, p: int):
    """(B, C, H, W) -> (B, H/p * W/p, C*p*p), tokens in row-major order."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ConfigError(f"spatial dims {h}x{w} not divisible by patch size {p}")
    x = x.reshape(b, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 1, 3, 5).reshape(b, (h // p) * (w // p), c * p * p)


def unpatchify(tokens, p: int, channels: int, height: int, width: int):
    b = tokens.shape[0]
    gh, gw = height // p, width // p
    x = tokens.reshape(b, gh, gw, channels, p, p)
    return x.permute(0, 3, 1, 4, 2, 5).reshape(b, channels, height, width)


def sincos_2d(dim: int, gh: int, gw: int, device=None):
    """Fixed 2-D sine-cosine position embedding, shape (gh*gw, dim)."""
    assert dim % 4 == 0
    quarter = dim // 4
    omega = 1.0 / 10000 ** (torch.arange(quarter, dtype=torch.float32, device=device) / quarter)
    ys, xs = torch.meshgrid(torch.arange(gh, dtype=torch.float32, device=device),
                            torch.arange(gw, dtype=torch.float32, device=device), indexing="ij")
    out = []
    for pos in (ys.reshape(-1), xs.reshape(-1)):
        arg = pos[:, None] * omega[None]
        out += [arg.sin(), arg.cos()]
    return torch.cat(out, dim=1)


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, freq_dim: int = 128):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t):
        half = self.freq_dim // 2
        freqs = torch.exp(-math.log(10000) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
        arg = (1000 * t.float())[:, None] * freqs[None]
        emb = torch.cat([arg.cos(), arg.sin()], dim=-1).to(next(self.mlp.parameters()).dtype)
        return self.mlp(emb)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, int(dim * ratio))
        self.fc2 = nn.Linear(int(dim * ratio), dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


def _fold_input(linear: nn.Linear, shift, scale):
    # linear(x * (1 + scale) + shift) == linear'(x)
    w = linear.weight.data.double()
    dtype = linear.weight.dtype
    linear.bias.data = (linear.bias.data.double() + w @ shift.double()).to(dtype)
    linear.weight.data = (w * (1 + scale.double())[None, :]).to(dtype)


def _fold_output(linear: nn.Linear, gate):
    # gate * linear(x) == linear'(x)
    dtype = linear.weight.dtype
    linear.weight.data = (linear.weight.data.double() * gate.double()[:, None]).to(dtype)
    linear.bias.data = (linear.bias.data.double() * gate.double()).to(dtype)


class DiTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(dim, mlp_ratio)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x, emb):
        if self.adaLN_modulation is None:
            x = x + self.attn(self.norm1(x))
            return x + self.mlp(self.norm2(x))
        s_msa, sc_msa, g_msa, s_mlp, sc_mlp, g_mlp = self.adaLN_modulation(emb).chunk(6, dim=1)
        x = x + g_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), s_msa, sc_msa))
        return x + g_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), s_mlp, sc_mlp))

    @torch.no_grad()
    def fold(self, emb):
        """Bake the modulation for a single embedding vector (dim,) into the linear layers."""
        s_msa, sc_msa, g_msa, s_mlp, sc_mlp, g_mlp = self.adaLN_modulation(emb[None])[0].chunk(6)
        _fold_input(self.attn.qkv, s_msa, sc_msa)
        _fold_output(self.attn.proj, g_msa)
        _fold_input(self.mlp.fc1, s_mlp, sc_mlp)
        _fold_output(self.mlp.fc2, g_mlp)
        self.adaLN_modulation = None


class NeuralFieldHead(nn.Module):
    """Per-token coordinate-conditioned decoder producing one p x p pixel patch per token.

    For every pixel inside the patch, a two-layer MLP sees the token feature, a
    fixed sinusoidal encoding of the in-patch coordinate and the noisy pixel value.
    """

    def __init__(self, hidden: int, channels: int, patch: int = PIXEL_PATCH,
                 field_width: int = 32, coord_dim: int = 16):
        super().__init__()
        self.patch = patch
        self.channels = channels
        self.feat_in = nn.Linear(hidden, field_width)
        self.coord_in = nn.Linear(coord_dim, field_width, bias=False)
        self.pixel_in = nn.Linear(channels, field_width, bias=False)
        self.out = nn.Linear(field_width, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        ys, xs = torch.meshgrid(torch.linspace(0, 1, patch), torch.linspace(0, 1, patch), indexing="ij")
        freqs = 2.0 ** torch.arange(coord_dim // 4) * math.pi
        arg = torch.cat([ys.reshape(-1, 1) * freqs, xs.reshape(-1, 1) * freqs], dim=1)
        self.register_buffer("coords", torch.cat([arg.sin(), arg.cos()], dim=1), persistent=False)

    def forward(self, feats, x_patches):
        # feats: (B, N, hidden); x_patches: (B, N, C*p*p) channel-major
        b, n, _ = feats.shape
        px = x_patches.reshape(b, n, self.channels, self.patch * self.patch).transpose(-1, -2)
        h = self.feat_in(feats).unsqueeze(2) + self.coord_in(self.coords) + self.pixel_in(px)
        out = self.out(F.gelu(h))  # (B, N, p*p, C)
        return out.transpose(-1, -2).reshape(b, n, -1)


class FinalLayer(nn.Module):
    def __init__(self, hidden: int, out: nn.Module):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)
        self.out = out

    def modulated(self, x, emb):
        x = self.norm(x)
        if self.adaLN_modulation is None:
            return x
        shift, scale = self.adaLN_modulation(emb).chunk(2, dim=1)
        return modulate(x, shift, scale)

    @torch.no_grad()
    def fold(self, emb):
        shift, scale = self.adaLN_modulation(emb[None])[0].chunk(2)
        target = self.out.feat_in if isinstance(self.out, NeuralFieldHead) else self.out
        _fold_input(target, shift, scale)
        self.adaLN_modulation = None


@dataclass
class Prediction:
    value: torch.Tensor
    target: str  # "V" or "X"


class Denoiser(nn.Module):
    """DiT backbone plus decoupled head operating at 1/16 of the image resolution.

    ``space='pixel'`` patchifies images with 16x16 patches and decodes with a
    neural-field head; ``space='latent'`` patchifies 1/8-resolution latents with
    2x2 patches and decodes with a linear head.
    """

    def __init__(self, space: str = "pixel", in_channels: int = 3, d_cond: int = 64, hidden: int = 64,
                 depth: int = 4, head_depth: Optional[int] = None, heads: int = 4, mlp_ratio: float = 4.0,
                 prediction_target: str = "V", field_width: int = 32, use_pos_embed: bool = True,
                 adaln_condition: bool = False):
        super().__init__()
        if space not in ("pixel", "latent"):
            raise ConfigError(f"unknown space {space!r}")
        if prediction_target not in ("V", "X"):
            raise ConfigError(f"unknown prediction target {prediction_target!r}")
        if head_depth is None:
            head_depth = max(1, depth // 4)
        if not 0 < head_depth < depth:
            raise ConfigError(f"head_depth must be in [1, depth), got {head_depth} with depth {depth}")
        if hidden % heads or hidden % 4:
            raise ConfigError(f"hidden={hidden} must be divisible by heads={heads} and 4")
        self.space = space
        self.in_channels = in_channels
        self.d_cond = d_cond
        self.hidden = hidden
        self.prediction_target = prediction_target
        self.patch = PIXEL_PATCH if space == "pixel" else LATENT_PATCH
        self.use_pos_embed = use_pos_embed
        self.adaln_condition = adaln_condition
        self.folded = False
        token_dim = in_channels * self.patch ** 2

        self.x_embed = nn.Linear(token_dim + d_cond, hidden)
        self.null_condition = nn.Parameter(torch.zeros(d_cond))
        self.t_embedder = TimestepEmbedder(hidden)
        self.cond_pool = nn.Linear(d_cond, hidden) if adaln_condition else None
        backbone_depth = depth - head_depth
        self.backbone = nn.ModuleList(DiTBlock(hidden, heads, mlp_ratio) for _ in range(backbone_depth))
        self.repa_layer = min(max(1, depth // 2), backbone_depth)
        self.head_embed = nn.Linear(token_dim, hidden)
        self.head = nn.ModuleList(DiTBlock(hidden, heads, mlp_ratio) for _ in range(head_depth))
        if space == "pixel":
            out = NeuralFieldHead(hidden, in_channels, self.patch, field_width)
        else:
            out = nn.Linear(hidden, token_dim)
            nn.init.zeros_(out.weight)
            nn.init.zeros_(out.bias)
        self.final = FinalLayer(hidden, out)

    # ---------------------------------------------------------------- helpers

    def condition_shape(self, height: int, width: int):
        """Spatial shape of the condition for a sample of the given spatial size."""
        return height // self.patch, width // self.patch

    def sample_shape(self, c):
        b, _, h, w = c.shape
        return b, self.in_channels, h * self.patch, w * self.patch

    def resolve_condition(self, c, batch: int, gh: int, gw: int, drop_mask=None):
        null = self.null_condition.view(1, -1, 1, 1).expand(batch, -1, gh, gw)
        if c is None:
            return null
        if c.shape[1:] != (self.d_cond, gh, gw):
            raise ConfigError(f"condition shape {tuple(c.shape[1:])} does not match {(self.d_cond, gh, gw)}")
        if drop_mask is not None:
            c = torch.where(drop_mask.view(-1, 1, 1, 1), null, c)
        return c

    def _emb(self, t, c):
        if self.folded:
            return None
        emb = self.t_embedder(t)
        if self.cond_pool is not None:
            emb = emb + self.cond_pool(c.mean(dim=(2, 3)))
        return emb

    # ---------------------------------------------------------------- forward

    def forward(self, x_t, t, c=None, drop_mask=None, return_features: bool = False):
        b, ch, h, w = x_t.shape
        if ch != self.in_channels:
            raise ConfigError(f"expected {self.in_channels} channels, got {ch}")
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1).expand(b)
        if self.folded and bool((t != 0).any()):
            raise StateError("folded model is only defined at t = 0")
        gh, gw = h // self.patch, w // self.patch
        xp = patchify(x_t, self.patch)
        c = self.resolve_condition(c, b, gh, gw, drop_mask)
        ctok = c.flatten(2).transpose(1, 2)
        tok = self.x_embed(torch.cat([xp, ctok], dim=-1))
        if self.use_pos_embed:
            pos = sincos_2d(self.hidden, gh, gw, x_t.device).to(tok.dtype)
            tok = tok + pos
        emb = self._emb(t, c)
        feats = None
        for i, block in enumerate(self.backbone):
            tok = block(tok, emb)
            if i + 1 == self.repa_layer:
                feats = tok
        hd = tok + self.head_embed(xp)
        for block in self.head:
            hd = block(hd, emb)
        hd = self.final.modulated(hd, emb)
        if self.space == "pixel":
            out = self.final.out(hd, xp)
        else:
            out = self.final.out(hd)
        out = unpatchify(out, self.patch, self.in_channels, h, w)
        if return_features:
            return out, feats
        return out

    def predict(self, x_t, t, c=None) -> Prediction:
        return Prediction(self(x_t, t, c), self.prediction_target)


def cfg_predict(model, x_t, t, c, scale: float) -> Prediction:
    """uncond + scale * (cond - uncond) in the model's own prediction space."""
    if scale < 0:
        raise ConfigError(f"guidance scale must be >= 0, got {scale}")
    b = x_t.shape[0]
    if c is None or scale == 1.0:
        return model.predict(x_t, t, c)
    t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device).reshape(-1).expand(b)
    both = model(torch.cat([x_t, x_t]), torch.cat([t, t]), torch.cat([c, c]),
                 drop_mask=torch.arange(2 * b, device=x_t.device) >= b)
    cond, uncond = both[:b], both[b:]
    return Prediction(uncond + scale * (cond - uncond), model.prediction_target)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@torch.no_grad()
def fold_adaln(model: Denoiser) -> Denoiser:
    """Return a copy with every AdaLN-Zero modulation precomputed at t=0 and removed.

    The folded copy only accepts t == 0.
    """
    if model.adaln_condition:
        raise StateError("cannot fold: AdaLN modulation depends on the condition")
    if model.folded:
        return model
    folded = copy.deepcopy(model)
    p = next(model.parameters())
    emb = folded.t_embedder(torch.zeros(1, dtype=p.dtype, device=p.device))[0]
    for block in list(folded.backbone) + list(folded.head):
        block.fold(emb)
    folded.final.fold(emb)
    folded.t_embedder = None
    folded.folded = True
    return folded
