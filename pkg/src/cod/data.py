"""Desk-scale image data: PNG directories and crops of scikit-image's bundled photographs."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import torch
from PIL import Image

# Colour photographs shipped inside scikit-image (no download needed).
SAMPLE_IMAGES = ("astronaut", "coffee", "chelsea", "rocket", "immunohistochemistry",
                 "hubble_deep_field", "retina", "colorwheel", "cat")
# Fraction of every source image (by rows) reserved for the held-out split.
HELDOUT_FRACTION = 0.25


def to_tensor(arr: np.ndarray) -> torch.Tensor:
    """uint8 HWC -> float CHW in [-1, 1]."""
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """float CHW in [-1, 1] -> uint8 HWC, rounding to the nearest level."""
    x = ((x.detach().float().clamp(-1, 1) + 1) * 127.5).round()
    return x.permute(1, 2, 0).to(torch.uint8).cpu().numpy()


def quantize_8bit(x: torch.Tensor) -> torch.Tensor:
    """Round a [-1, 1] tensor to the 256 levels an 8-bit PNG can hold."""
    return ((x.clamp(-1, 1) + 1) * 127.5).round() / 127.5 - 1


def read_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        return to_tensor(np.asarray(im.convert("RGB")))


def write_png(x: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(x)).save(path, format="PNG", optimize=False)


def _center_crop(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    scale = size / min(h, w)
    if scale != 1:
        im = Image.fromarray(arr).resize((max(size, round(w * scale)), max(size, round(h * scale))),
                                         Image.BICUBIC)
        arr = np.asarray(im)
        h, w = arr.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return arr[top:top + size, left:left + size]


def load_png_dir(path, size: int) -> torch.Tensor:
    """All PNGs in a directory (sorted by name), resized and centre-cropped to size x size."""
    files = sorted(Path(path).glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG files in {path}")
    out = []
    for f in files:
        with Image.open(f) as im:
            out.append(to_tensor(_center_crop(np.asarray(im.convert("RGB")), size)))
    return torch.stack(out)


def _sources(scales=(0.25, 0.5)):
    import skimage.data

    for name in SAMPLE_IMAGES:
        arr = getattr(skimage.data, name)()
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=-1)
        arr = arr[..., :3]
        for s in scales:
            h, w = arr.shape[:2]
            im = Image.fromarray(arr).resize((max(8, round(w * s)), max(8, round(h * s))), Image.BICUBIC)
            yield np.asarray(im)


def desk_images(n: int, size: int = 32, split: str = "train", seed: int = 0) -> torch.Tensor:
    """Random size x size crops from downscaled sample photographs.

    ``split='train'`` crops from the top rows of each source, ``split='heldout'``
    from the bottom ``HELDOUT_FRACTION`` so the two never overlap. Deterministic
    in (n, size, split, seed).
    """
    if split not in ("train", "heldout"):
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, size, 0 if split == "train" else 1])
    regions = []
    for arr in _sources():
        h = arr.shape[0]
        cut = int(h * (1 - HELDOUT_FRACTION))
        region = arr[:cut] if split == "train" else arr[cut:]
        if region.shape[0] >= size and region.shape[1] >= size:
            regions.append(region)
    weights = np.array([(r.shape[0] - size + 1) * (r.shape[1] - size + 1) for r in regions], dtype=float)
    weights /= weights.sum()
    picks = rng.choice(len(regions), size=n, p=weights)
    out = np.empty((n, size, size, 3), dtype=np.uint8)
    for i, k in enumerate(picks):
        r = regions[k]
        y = rng.integers(0, r.shape[0] - size + 1)
        x = rng.integers(0, r.shape[1] - size + 1)
        crop = r[y:y + size, x:x + size]
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        out[i] = crop
    return torch.from_numpy(out.astype(np.float32) / 127.5 - 1.0).permute(0, 3, 1, 2).contiguous()


def dataset_hash(images: torch.Tensor) -> str:
    """Content hash of the 8-bit version of a dataset."""
    h = hashlib.sha256()
    h.update(str(tuple(images.shape)).encode())
    for x in images:
        h.update(to_uint8(x).tobytes())
    return h.hexdigest()[:16]


def export_png_dir(images: torch.Tensor, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(images):
        write_png(x, path / f"{i:05d}.png")
