"""Image I/O, color conversion, the bicubic reference downsampler, and patch
sampling.

Images travel as float arrays (H, W, 3) in [0, 1] with 8-bit provenance; the
training batch layout is (B, 3, P, P).  The downsampler matches the widely
used antialiased convention (a = -0.5 cubic, support widened by the scale
factor, per-pixel weight normalization, clamped source coordinates) so the
guidance target agrees with what evaluation assumes.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

_REJECT_MODES = {"I", "I;16", "I;16B", "I;16L", "I;16N", "F"}


def load_png(path) -> np.ndarray:
    """Read an 8-bit RGB or grayscale PNG as (H, W, 3) float64 in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ValueError(f"{path}: not a PNG file (got {im.format})")
            if im.mode in _REJECT_MODES:
                raise ValueError(
                    f"{path}: unsupported bit depth (mode {im.mode}); only 8-bit "
                    "images are accepted"
                )
            if im.mode == "P":
                im = im.convert("RGB")
            if im.mode == "L":
                im = im.convert("RGB")
            if im.mode != "RGB":
                raise ValueError(
                    f"{path}: unsupported mode {im.mode}; need 8-bit RGB or gray"
                )
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except Image.UnidentifiedImageError as exc:
        raise ValueError(f"{path}: malformed or non-image file") from exc
    return arr


def save_png(path, img: np.ndarray) -> None:
    """Write (H, W, 3) floats in [0, 1] as an 8-bit PNG (round-half-even,
    matching the straight-through quantizer so file round trips are exact)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"save_png: expected (H, W, 3), got {img.shape}")
    data = np.clip(np.round(img * 255.0), 0.0, 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    """Luma plane (studio-range BT.601): (H, W, 3) in [0,1] -> (H, W) in [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    y = 65.481 * img[..., 0] + 128.553 * img[..., 1] + 24.966 * img[..., 2]
    return (16.0 + y) / 255.0


# ---------------------------------------------------------------------------
# antialiased bicubic downsampling
# ---------------------------------------------------------------------------

def _cubic(x: np.ndarray) -> np.ndarray:
    # Keys kernel with a = -0.5
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = (1.5 * ax3 - 2.5 * ax2 + 1.0) * (ax <= 1.0)
    far = (-0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0) * ((ax > 1.0) & (ax <= 2.0))
    return near + far


def bicubic_weights(in_length: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    """Tap indices and normalized weights for one downsampled axis.

    Returns (indices, weights), each (out_length, taps).  Align-centers
    mapping src = (dst + 0.5) * s - 0.5; the kernel support is widened by s
    for antialiasing; indices are clamped to the valid range (replicating
    edges); each weight row sums to 1.
    """
    if in_length % s:
        raise ValueError(f"length {in_length} not divisible by scale {s}")
    out_length = in_length // s
    support = 4.0 * s
    u = (np.arange(out_length, dtype=np.float64) + 0.5) * s - 0.5
    left = np.floor(u - support / 2.0)
    taps = int(np.ceil(support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = _cubic((u[:, None] - idx) / s) / s
    wts = wts / wts.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 0, in_length - 1).astype(np.intp)
    return idx, wts


def _resize_axis(arr: np.ndarray, axis: int, s: int) -> np.ndarray:
    idx, wts = bicubic_weights(arr.shape[axis], s)
    moved = np.moveaxis(arr, axis, 0)
    out = np.zeros((idx.shape[0],) + moved.shape[1:], dtype=arr.dtype)
    for t in range(idx.shape[1]):
        w = wts[:, t].reshape((-1,) + (1,) * (moved.ndim - 1))
        out += w.astype(arr.dtype) * moved[idx[:, t]]
    return np.moveaxis(out, 0, axis)


def bicubic_downsample(img: np.ndarray, s: int) -> np.ndarray:
    """Downsample (H, W, ...) by integer factor s along the first two axes."""
    if img.shape[0] % s or img.shape[1] % s:
        raise ValueError(
            f"image size {img.shape[0]}x{img.shape[1]} not divisible by {s}"
        )
    return _resize_axis(_resize_axis(img, 0, s), 1, s)


def bicubic_downsample_batch(batch: np.ndarray, s: int) -> np.ndarray:
    """Same kernel applied to a (B, C, H, W) batch."""
    if batch.shape[2] % s or batch.shape[3] % s:
        raise ValueError(
            f"batch spatial size {batch.shape[2]}x{batch.shape[3]} not divisible by {s}"
        )
    return _resize_axis(_resize_axis(batch, 2, s), 3, s)


# ---------------------------------------------------------------------------
# corpus handling
# ---------------------------------------------------------------------------

def load_corpus(directory) -> list[tuple[str, np.ndarray]]:
    """All PNGs in a directory, sorted by name for reproducibility."""
    directory = Path(directory)
    paths = sorted(directory.glob("*.png"))
    if not paths:
        raise ValueError(f"no PNG images found in {directory}")
    return [(p.name, load_png(p)) for p in paths]


def random_crop_batch(corpus: Sequence[tuple[str, np.ndarray]], batch: int,
                      patch: int, s: int, rng: np.random.Generator):
    """B uniform HR crops with offsets divisible by s.

    Returns (array (B, 3, P, P) float64, image ids, (y, x) offsets).  Images
    smaller than the patch are skipped with a warning; an empty usable corpus
    is rejected.
    """
    if patch % s:
        raise ValueError(f"patch size {patch} not divisible by scale {s}")
    usable = []
    for i, (name, img) in enumerate(corpus):
        if img.shape[0] < patch or img.shape[1] < patch:
            print(f"warning: {name} smaller than {patch}x{patch}, skipped",
                  file=sys.stderr)
            continue
        usable.append(i)
    if not usable:
        raise ValueError(f"no corpus image is at least {patch}x{patch}")
    out = np.empty((batch, 3, patch, patch), dtype=np.float64)
    ids = []
    offsets = []
    for b in range(batch):
        i = usable[rng.integers(0, len(usable))]
        img = corpus[i][1]
        ny = (img.shape[0] - patch) // s + 1
        nx = (img.shape[1] - patch) // s + 1
        oy = int(rng.integers(0, ny)) * s
        ox = int(rng.integers(0, nx)) * s
        out[b] = img[oy:oy + patch, ox:ox + patch].transpose(2, 0, 1)
        ids.append(i)
        offsets.append((oy, ox))
    return out, ids, offsets


def make_synthetic_corpus(directory, count: int, size: int = 96, seed: int = 0) -> list[Path]:
    """Deterministic synthetic test images: smooth waves and gradients plus a
    few hard-edged shapes, enough structure for desk-scale training."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    paths = []
    for i in range(count):
        img = np.zeros((size, size, 3))
        base = rng.uniform(0.5, 1.5) * (rng.uniform(-1, 1) * yy + rng.uniform(-1, 1) * xx)
        for _ in range(4):
            fy, fx = rng.uniform(-6, 6, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            base = base + rng.uniform(0.2, 0.8) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        sigma = rng.uniform(0.05, 0.25)
        base = base + rng.uniform(0.5, 1.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        tint = rng.uniform(0.5, 1.0, size=3)
        for c in range(3):
            img[:, :, c] = tint[c] * base + 0.15 * rng.uniform(-1, 1) * (yy - xx)
        for _ in range(3):
            y0, x0 = rng.integers(0, max(1, size - 8), size=2)
            hgt, wid = rng.integers(2, max(3, size // 3), size=2)
            img[y0:y0 + hgt, x0:x0 + wid] = rng.uniform(0, 1, size=3)
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo)
        path = directory / f"img_{i:03d}.png"
        save_png(path, img)
        paths.append(path)
    return paths
