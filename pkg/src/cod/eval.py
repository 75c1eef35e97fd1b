"""Metrics, sweep harnesses and result files (CSV + SVG)."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import torch

from . import codec as codec_mod
from .core import ConfigError, compute_rate
from .data import quantize_8bit
from .features import feature_distance

PSNR_CAP = 99.0
CSV_COLUMNS = ("axis", "bpp", "psnr_db", "feature_distance", "proxy_fid", "steps", "preset", "model_id")


@dataclass(frozen=True)
class PSNR:
    db: float
    exact: bool = False

    def __float__(self):
        return self.db


def psnr(x, y, data_range: float = 1.0) -> PSNR:
    """10 log10(range^2 / MSE) for tensors in [0, data_range]; identical inputs give the 99 dB cap."""
    x = torch.as_tensor(x, dtype=torch.float64)
    y = torch.as_tensor(y, dtype=torch.float64)
    if x.shape != y.shape:
        raise ConfigError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return PSNR(PSNR_CAP, True)
    return PSNR(min(PSNR_CAP, 10 * math.log10(data_range ** 2 / mse)))


def to_unit(x):
    return (x.clamp(-1, 1) + 1) / 2


def dataset_psnr(reference, recon) -> float:
    """Mean per-image PSNR of [-1, 1] tensors after rounding both to 8 bits."""
    ref = to_unit(quantize_8bit(reference))
    rec = to_unit(quantize_8bit(recon))
    return float(np.mean([psnr(a, b).db for a, b in zip(ref, rec)]))


@torch.no_grad()
def dataset_feature_distance(reference, recon, extractor, batch_size: int = 64) -> float:
    out = [feature_distance(reference[i:i + batch_size], recon[i:i + batch_size], extractor, reduce=False)
           for i in range(0, len(reference), batch_size)]
    return float(torch.cat(out).mean())


def channel_mean_error(reference, recon) -> float:
    """Mean absolute difference of per-image, per-channel means (colour shift), in [0, 1] units."""
    return float((to_unit(reference).mean(dim=(2, 3)) - to_unit(recon).mean(dim=(2, 3))).abs().mean())


# ----------------------------------------------------------------------- FID


def extract_patches(images, size: int, stride: Optional[int] = None):
    """Square patches on a regular grid; non-overlapping unless a smaller stride is given."""
    stride = stride or size
    b, c, h, w = images.shape
    if h < size or w < size:
        raise ConfigError(f"patch size {size} exceeds image {h}x{w}")
    p = images.unfold(2, size, stride).unfold(3, size, stride)  # b c nh nw size size
    return p.permute(0, 2, 3, 1, 4, 5).reshape(-1, c, size, size)


def _trace_sqrt_product(s1, s2) -> float:
    # eigenvalues of s1 @ s2 are real and >= 0 for PSD inputs
    ev = scipy.linalg.eigvals(s1 @ s2)
    return float(np.sqrt(np.clip(ev.real, 0, None)).sum())


@dataclass(frozen=True)
class FrechetResult:
    value: float
    ridge_added: bool

    def __float__(self):
        return self.value


def frechet_distance(feats1, feats2, ridge: float = 1e-6) -> FrechetResult:
    """Fréchet distance between Gaussian fits of two (n, d) feature sets."""
    a = np.asarray(feats1, dtype=np.float64)
    b = np.asarray(feats2, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if len(a) < 2 or len(b) < 2:
        raise ConfigError("need at least two samples per side")
    mu1, mu2 = a.mean(0), b.mean(0)
    s1 = np.atleast_2d(np.cov(a, rowvar=False))
    s2 = np.atleast_2d(np.cov(b, rowvar=False))
    ridged = False
    d = s1.shape[0]
    if min(np.linalg.eigvalsh(s1).min(), np.linalg.eigvalsh(s2).min()) <= 0:
        s1 = s1 + ridge * np.eye(d)
        s2 = s2 + ridge * np.eye(d)
        ridged = True
    # averaging both orders makes the result exactly symmetric in floating point
    tr = 0.5 * (_trace_sqrt_product(s1, s2) + _trace_sqrt_product(s2, s1))
    # fsum is correctly rounded, so swapping the arguments cannot change the result
    value = math.fsum([float(((mu1 - mu2) ** 2).sum()), float(np.trace(s1)), float(np.trace(s2)), -2 * tr])
    return FrechetResult(max(value, 0.0), ridged)


@torch.no_grad()
def patch_features(patches, extractor, batch_size: int = 256):
    out = [extractor(patches[i:i + batch_size]).mean(dim=(2, 3)) for i in range(0, len(patches), batch_size)]
    return torch.cat(out).double().numpy()


def proxy_fid(real_patches, fake_patches, extractor) -> FrechetResult:
    if len(real_patches) < 2 or len(fake_patches) < 2:
        raise ConfigError("need at least two patches per side")
    return frechet_distance(patch_features(real_patches, extractor), patch_features(fake_patches, extractor))


# ------------------------------------------------------------------- records


@dataclass
class MetricRecord:
    bpp: float
    psnr_db: float
    feature_distance: float = float("nan")
    proxy_fid: float = float("nan")
    steps: int = 0
    preset: str = ""
    model_id: str = ""

    def __post_init__(self):
        if not self.bpp > 0:
            raise ConfigError(f"bpp must be > 0, got {self.bpp}")
        if self.psnr_db < 0:
            raise ConfigError(f"psnr must be >= 0, got {self.psnr_db}")

    def same_as(self, other: "MetricRecord") -> bool:
        def eq(a, b):
            return a == b or (isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b))
        return all(eq(getattr(self, f.name), getattr(other, f.name)) for f in fields(self))


@dataclass
class SweepResult:
    axis: str
    rows: list = field(default_factory=list)  # list of (axis value, MetricRecord)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = [v for v, _ in self.rows]
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError(f"sweep axis {self.axis!r} values must be strictly increasing: {vals}")

    @property
    def values(self):
        return [v for v, _ in self.rows]

    @property
    def records(self):
        return [r for _, r in self.rows]

    def column(self, name: str):
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for v, r in self.rows:
            w.writerow([repr(v), repr(float(r.bpp)), repr(float(r.psnr_db)), repr(float(r.feature_distance)),
                        repr(float(r.proxy_fid)), int(r.steps), r.preset, r.model_id])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, axis: str) -> "SweepResult":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ConfigError(f"unexpected CSV header {header}")
        rows = []
        for row in reader:
            v = float(row[0])
            if v.is_integer() and "." not in row[0] and "e" not in row[0]:
                v = int(v)
            rows.append((v, MetricRecord(float(row[1]), float(row[2]), float(row[3]), float(row[4]),
                                         int(row[5]), row[6], row[7])))
        return cls(axis, rows)

    def same_as(self, other: "SweepResult") -> bool:
        return (self.axis == other.axis and self.values == other.values
                and all(a.same_as(b) for a, b in zip(self.records, other.records)))


def write_svg(result: SweepResult, path, y: str = "psnr_db") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "cod"
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(result.values, result.column(y), marker="o")
    ax.set_xlabel(result.axis)
    ax.set_ylabel(y)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_outputs(result: SweepResult, out_dir, name: str = "results") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    csv_path.write_text(result.to_csv())
    svg_path = out_dir / f"{name}.svg"
    write_svg(result, svg_path)
    return csv_path, svg_path


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:10]


def run_dir(root, config) -> Path:
    return Path(root) / f"{time.strftime('%Y%m%d-%H%M%S')}-{config_hash(config)}"


def model_hash(model) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:12]


# --------------------------------------------------------------------- sweeps


@torch.no_grad()
def evaluate(model, images, steps: int = 25, solver: str = "second_order", seed: int = 0,
             extractor=None, cfg_scale: Optional[float] = None, patch_size: Optional[int] = None,
             preset: str = "", model_id: str = "", batch_size: int = 64, return_recon: bool = False):
    """Encode + decode a dataset and score it. Image i is decoded with seed ``seed + i``."""
    recon = []
    for i in range(0, len(images), batch_size):
        batch = images[i:i + batch_size]
        idx = codec_mod.encode_tokens(model, batch)
        seeds = [seed + i + j for j in range(len(batch))]
        recon.append(codec_mod.decode_tokens(model, idx, seeds, steps, solver, cfg_scale))
    recon = quantize_8bit(torch.cat(recon))
    rec = MetricRecord(compute_rate(model.codec).bpp, dataset_psnr(images, recon), steps=steps,
                       preset=preset, model_id=model_id or model_hash(model))
    if extractor is not None:
        rec.feature_distance = dataset_feature_distance(images, recon, extractor)
        ps = patch_size or images.shape[-1]
        real, fake = extract_patches(images, ps), extract_patches(recon, ps)
        if len(real) >= 2:
            rec.proxy_fid = proxy_fid(real, fake, extractor).value
    return (rec, recon) if return_recon else rec


def dp_sweep(model, images, steps_list: Sequence[int], extractor=None, seed: int = 0,
             solver: str = "second_order", cfg_scale: Optional[float] = None) -> SweepResult:
    steps_list = sorted(steps_list)
    rows = [(s, evaluate(model, images, s, solver, seed, extractor, cfg_scale)) for s in steps_list]
    return SweepResult("steps", rows)


def rd_table(models: dict, images_by_model: dict, steps: int = 1, extractor=None, seed: int = 0,
             solver: str = "second_order") -> SweepResult:
    """One record per model, sorted by bpp. ``models`` maps a preset name to a trained model."""
    rows = []
    for name, model in models.items():
        rec = evaluate(model, images_by_model[name], steps, solver, seed, extractor, preset=name)
        rows.append((rec.bpp, rec))
    rows.sort(key=lambda r: r[0])
    return SweepResult("bpp", rows)


def scaling_sweep(widths: Sequence[int], train_images, val_images, codec_config, arch, train_config,
                  extractor=None, eval_extractor=None, steps: int = 1, seed: int = 0,
                  val_batches: int = 4) -> SweepResult:
    """Train one model per width under an identical budget and record validation loss and metrics."""
    from dataclasses import replace as dc_replace

    from .training import train_loop, validation_loss
    from .model import CoDModel

    widths = list(widths)
    if widths != sorted(widths):
        raise ConfigError("width list must be ascending")
    rows, extras = [], {}
    for w in widths:
        torch.manual_seed(seed)
        model = CoDModel(dc_replace(codec_config, channel_width=w), arch)
        reports = train_loop(model, train_images, train_config, extractor)
        vloss = validation_loss(model, val_images, train_config, seed=seed + 1, batches=val_batches)
        rec = evaluate(model, val_images, steps, seed=seed, extractor=eval_extractor, model_id=f"width{w}")
        rows.append((w, rec))
        extras[w] = {"val_loss": vloss, "train_loss": reports[-1].total if reports else math.nan,
                     "params": sum(p.numel() for p in model.parameters()), "model": model}
    return SweepResult("width", rows, extras)
