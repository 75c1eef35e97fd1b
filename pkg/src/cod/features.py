"""Pluggable frozen feature extractors.

Anything that maps images in [-1, 1] of shape (B, 3, H, W) to a feature map of
shape (B, dim, H/16, W/16) can stand in for the representation network used by
REPA, the auxiliary feature head and the perceptual proxy metrics. The default
is a randomly initialised, frozen convolutional encoder with a fixed seed.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_EXTRACTOR_SEED = 20250917
EVAL_EXTRACTOR_SEED = 7


class RandomConvExtractor(nn.Module):
    stride = 16

    def __init__(self, dim: int = 64, widths=(32, 64, 64), seed: int = DEFAULT_EXTRACTOR_SEED):
        super().__init__()
        self.dim = dim
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        chans = (3, *widths, dim)
        self.layers = nn.ModuleList(
            nn.Conv2d(cin, cout, 4, stride=2, padding=1) for cin, cout in zip(chans[:-1], chans[1:])
        )
        with torch.no_grad():
            for conv in self.layers:
                fan_in = conv.in_channels * 16
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x, return_all: bool = False):
        feats = []
        h = x
        for i, conv in enumerate(self.layers):
            h = conv(h)
            if i < len(self.layers) - 1:
                h = F.gelu(h)
            feats.append(h)
        return feats if return_all else h


def cosine_distance(pred, target, dim: int = 1):
    """1 - mean cosine similarity along ``dim``, averaged over every other axis."""
    return 1.0 - F.cosine_similarity(pred, target, dim=dim, eps=1e-8).mean()


def feature_distance(x, y, extractor, reduce: bool = True):
    """LPIPS-style distance: unit-normalised channel features, squared error, averaged over layers.

    Returns a scalar, or one value per batch element with ``reduce=False``.
    """
    fx = extractor(x, return_all=True)
    fy = extractor(y, return_all=True)
    per_layer = []
    for a, b in zip(fx, fy):
        a = F.normalize(a, dim=1, eps=1e-8)
        b = F.normalize(b, dim=1, eps=1e-8)
        per_layer.append(((a - b) ** 2).sum(1).mean(dim=(1, 2)))
    d = torch.stack(per_layer).mean(0)
    return d.mean() if reduce else d
