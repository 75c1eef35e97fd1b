"""End-to-end encode/decode, presets, and the latent-space reconstruction ceiling."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch

from . import flow
from .core import Bitstream, CodecConfig, ConfigError, FormatError, TokenGrid, compute_rate
from .model import CoDModel, IdentityAdapter, LatentAdapter  # noqa: F401  (re-exported)

DEFAULT_CFG_SCALE = {"pixel": 3.0, "latent": 1.25}
DEFAULT_STEPS = 25


@dataclass(frozen=True)
class CodecPreset:
    name: str
    downsample_factor: int
    codebook_size: int
    resolution: int = 512

    def config(self, height: Optional[int] = None, width: Optional[int] = None, **kw) -> CodecConfig:
        return CodecConfig(height or self.resolution, width or self.resolution,
                           self.downsample_factor, self.codebook_size, **kw)

    @property
    def nominal_bpp(self) -> float:
        return compute_rate(self.config()).bpp

    @property
    def nominal_bits(self) -> int:
        return compute_rate(self.config()).total_bits


PRESETS = {p.name: p for p in (
    CodecPreset("cod-base", 32, 16),
    CodecPreset("cod-64bit", 128, 16),
    CodecPreset("cod-mid", 16, 256),
    CodecPreset("cod-high", 8, 256),
)}


def get_preset(name: str) -> CodecPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def default_cfg_scale(model: CoDModel, steps: int) -> float:
    # The t=0 estimate is what unified training optimises for distortion; guidance
    # would extrapolate it away, so the one-step path runs unguided.
    return 1.0 if steps == 1 else DEFAULT_CFG_SCALE[model.codec.space]


def _as_batch(image):
    return image[None] if image.ndim == 3 else image


@torch.no_grad()
def encode_tokens(model: CoDModel, images) -> torch.Tensor:
    """(B, 3, H, W) images -> (B, rows, cols) token indices."""
    model.require_trained()
    images = _as_batch(images)
    model.check_image(images)
    return model.conditioner.encode(images).indices


@torch.no_grad()
def encode(model: CoDModel, image, seed: int = 0, preset: Optional[str] = None) -> Bitstream:
    if preset is not None:
        p = get_preset(preset)
        if (p.downsample_factor, p.codebook_size) != (model.codec.downsample_factor, model.codec.codebook_size):
            raise ConfigError(f"model is not configured for preset {preset}")
    idx = encode_tokens(model, image)
    if idx.shape[0] != 1:
        raise ConfigError("encode takes a single image; use encode_tokens for batches")
    return Bitstream.from_tokens(TokenGrid(idx[0].cpu().numpy()), model.codec, seed)


def check_stream(model: CoDModel, stream: Bitstream) -> None:
    c = model.codec
    got = (stream.height, stream.width, stream.downsample_factor, stream.bits_per_token)
    want = (c.height, c.width, c.downsample_factor, c.bits_per_token)
    if got != want:
        raise FormatError(f"bitstream geometry {got} does not match model {want}")


@torch.no_grad()
def decode_tokens(model: CoDModel, indices, seeds: Sequence[int], steps: int = DEFAULT_STEPS,
                  solver: str = "second_order", cfg_scale: Optional[float] = None):
    """Batch decode; item i draws its initial noise from seeds[i]. Returns images clamped to [-1, 1]."""
    model.eval()
    indices = torch.as_tensor(indices)
    if len(seeds) != indices.shape[0]:
        raise ConfigError("need one seed per item")
    if cfg_scale is None:
        cfg_scale = default_cfg_scale(model, steps)
    if steps == 1:
        # one step means eps + v(eps, 0); a Heun corrector would query t = 1
        solver = "euler"
    c = model.conditioner.decode_tokens(indices)
    shape = model.denoiser.sample_shape(c[:1])[1:]
    p = next(model.denoiser.parameters())
    noise = torch.stack([flow.seeded_noise(shape, s, p.dtype) for s in seeds])
    cfg = flow.SamplerConfig(steps=steps, solver=solver, cfg_scale=cfg_scale)
    x = flow.sample(model.denoiser, c, cfg, noise=noise)
    return model.from_sample_space(x).clamp(-1, 1)


@torch.no_grad()
def decode(model: CoDModel, stream: Bitstream, steps: int = DEFAULT_STEPS, solver: str = "second_order",
           cfg_scale: Optional[float] = None):
    check_stream(model, stream)
    grid = stream.tokens()
    grid.validate(model.codec.codebook_size)
    idx = torch.as_tensor(grid.indices)[None]
    return decode_tokens(model, idx, [stream.seed], steps, solver, cfg_scale)[0]


def dp_control_decode(model: CoDModel, stream: Bitstream, steps_list: Sequence[int],
                      solver: str = "second_order", cfg_scale: Optional[float] = None):
    """One decode per step count from the same embedded seed."""
    return [(s, decode(model, stream, s, solver, cfg_scale)) for s in steps_list]


@torch.no_grad()
def latent_roundtrip_ceiling(adapter, images, extractor=None, batch_size: int = 64):
    """PSNR (dB, on 8-bit outputs) and feature distance of the adapter's own round trip."""
    from .eval import dataset_feature_distance, dataset_psnr

    recon = torch.cat([adapter.decode(adapter.encode(images[i:i + batch_size])).clamp(-1, 1)
                       for i in range(0, len(images), batch_size)])
    psnr = dataset_psnr(images, recon)
    fd = dataset_feature_distance(images, recon, extractor) if extractor is not None else float("nan")
    return psnr, fd


def model_for_preset(preset: str, height: int, width: int, **kw) -> CodecConfig:
    return get_preset(preset).config(height, width, **kw)


def with_resolution(config: CodecConfig, height: int, width: int) -> CodecConfig:
    return replace(config, height=height, width=width)
