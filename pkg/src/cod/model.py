"""The assembled codec model and its toy latent autoencoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioner import AuxHeads, Conditioner
from .core import CodecConfig, ConfigError, StateError
from .network import Denoiser

LATENT_STRIDE = 8


@dataclass
class ArchConfig:
    """Architecture knobs not fixed by the operating point."""

    d_code: int = 8
    d_cond: int = 32
    enc_width: int = 32
    num_res_blocks: int = 4
    heads: int = 4
    head_depth: Optional[int] = None
    field_width: int = 32
    feature_dim: int = 64
    aux_width: int = 32
    latent_channels: int = 4
    use_aux: bool = True

    def __post_init__(self):
        for k in ("d_code", "d_cond", "enc_width", "num_res_blocks", "heads", "field_width",
                  "feature_dim", "aux_width", "latent_channels"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive")


class LatentAdapter(nn.Module):
    """Small convolutional autoencoder to 1/8-resolution latents; stands in for a pretrained VAE."""

    def __init__(self, channels: int = 4, width: int = 32):
        super().__init__()
        self.channels = channels
        enc, dec = [nn.Conv2d(3, width, 3, padding=1)], []
        for _ in range(3):
            enc += [nn.GELU(), nn.Conv2d(width, width, 4, stride=2, padding=1)]
        enc += [nn.GELU(), nn.Conv2d(width, channels, 1)]
        dec += [nn.Conv2d(channels, width, 3, padding=1)]
        for _ in range(3):
            dec += [nn.GELU(), nn.ConvTranspose2d(width, width, 4, stride=2, padding=1)]
        dec += [nn.GELU(), nn.Conv2d(width, 3, 3, padding=1)]
        self.enc = nn.Sequential(*enc)
        self.dec = nn.Sequential(*dec)

    def encode(self, x):
        return self.enc(x)

    def decode(self, z):
        return self.dec(z)

    def forward(self, x):
        return self.decode(self.encode(x))


class IdentityAdapter(nn.Module):
    """Lossless pass-through; useful for checking the ceiling bookkeeping."""

    channels = 3

    def encode(self, x):
        return x

    def decode(self, z):
        return z


class CoDModel(nn.Module):
    def __init__(self, codec: CodecConfig, arch: Optional[ArchConfig] = None,
                 adapter: Optional[nn.Module] = None):
        super().__init__()
        arch = arch or ArchConfig()
        self.codec = codec
        self.arch = arch
        if codec.space == "latent":
            if adapter is None:
                adapter = LatentAdapter(arch.latent_channels)
            adapter.requires_grad_(False)
            in_ch = adapter.channels
        else:
            in_ch = 3
        self.adapter = adapter
        self.conditioner = Conditioner(codec.downsample_factor, codec.codebook_size, arch.d_code,
                                       arch.d_cond, arch.enc_width, arch.num_res_blocks)
        self.denoiser = Denoiser(codec.space, in_ch, arch.d_cond, codec.channel_width, codec.depth,
                                 arch.head_depth, arch.heads, prediction_target=codec.prediction_target,
                                 field_width=arch.field_width)
        self.aux = AuxHeads(arch.d_cond, arch.feature_dim, arch.aux_width) if arch.use_aux else None
        self.repa_proj = nn.Sequential(nn.Linear(codec.channel_width, 2 * arch.feature_dim), nn.SiLU(),
                                       nn.Linear(2 * arch.feature_dim, arch.feature_dim))

    @property
    def quantizer(self):
        return self.conditioner.quantizer

    def check_image(self, image):
        if image.shape[-2:] != (self.codec.height, self.codec.width):
            raise ConfigError(f"image {tuple(image.shape[-2:])} does not match config "
                              f"{self.codec.height}x{self.codec.width}")

    def to_sample_space(self, image):
        if self.adapter is None:
            return image
        with torch.no_grad():
            return self.adapter.encode(image)

    def from_sample_space(self, x):
        return x if self.adapter is None else self.adapter.decode(x)

    def require_trained(self):
        if not bool(self.quantizer.initialized):
            raise StateError("codebook is untrained; train or load a checkpoint first")

    def describe(self) -> dict:
        return {"codec": asdict(self.codec), "arch": asdict(self.arch)}


def transfer_weights(dst: nn.Module, src_state: dict) -> list[str]:
    """Copy every tensor whose name and shape match; returns the names copied."""
    own = dst.state_dict()
    copied = []
    for k, v in src_state.items():
        if k in own and own[k].shape == v.shape:
            own[k] = v.clone()
            copied.append(k)
    dst.load_state_dict(own)
    return copied


def fit_adapter(adapter: LatentAdapter, images, steps: int = 300, lr: float = 2e-3,
                batch_size: int = 32, seed: int = 0) -> float:
    """Pre-train the toy autoencoder with MSE; returns the final batch loss. Freezes the adapter."""
    gen = torch.Generator().manual_seed(seed)
    adapter.requires_grad_(True)
    opt = torch.optim.Adam(adapter.parameters(), lr=lr)
    loss = torch.tensor(float("nan"))
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
        x = images[idx]
        loss = F.mse_loss(adapter(x), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
    adapter.requires_grad_(False)
    adapter.eval()
    return float(loss.detach())
