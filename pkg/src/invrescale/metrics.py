"""Y-channel PSNR and SSIM for evaluating restored images and LR fidelity.

Both metrics take single-channel planes whose values sit on the 0..255
scale.  Evaluation crops a border of s pixels per side first (the usual
super-resolution convention); the crop is recorded in the report.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PSNR_CAP_DB = 99.0

_WINDOW = 11
_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    name: str
    psnr_db: float
    ssim: float
    border_crop: int


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE); identical inputs give +inf (cap for display)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_display(value: float) -> float:
    """Cap the +inf sentinel at 99 dB for text output."""
    return min(value, PSNR_CAP_DB)


def _gauss_window() -> np.ndarray:
    half = (_WINDOW - 1) / 2.0
    t = np.arange(_WINDOW, dtype=np.float64) - half
    g = np.exp(-(t * t) / (2.0 * _SIGMA * _SIGMA))
    return g / g.sum()


_G1 = _gauss_window()


def _filter_valid(plane: np.ndarray) -> np.ndarray:
    """Separable Gaussian, valid positions only."""
    win = np.lib.stride_tricks.sliding_window_view(plane, _WINDOW, axis=0)
    out = win @ _G1
    win = np.lib.stride_tricks.sliding_window_view(out, _WINDOW, axis=1)
    return win @ _G1


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """Single-scale structural similarity, 11x11 Gaussian window sigma=1.5."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < _WINDOW:
        raise ValueError(
            f"ssim: plane {a.shape} smaller than the {_WINDOW}x{_WINDOW} window"
        )
    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a * mu_a
    var_b = _filter_valid(b * b) - mu_b * mu_b
    cov = _filter_valid(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def crop_border(plane: np.ndarray, border: int) -> np.ndarray:
    if border == 0:
        return plane
    if 2 * border >= min(plane.shape):
        raise ValueError(f"border {border} leaves nothing of plane {plane.shape}")
    return plane[border:-border, border:-border]


def evaluate_planes(name: str, a: np.ndarray, b: np.ndarray, border: int) -> MetricReport:
    """PSNR/SSIM of two [0,1] luma planes after the border crop."""
    ac = crop_border(a, border) * 255.0
    bc = crop_border(b, border) * 255.0
    return MetricReport(name, psnr(ac, bc), ssim(ac, bc), border)


def evaluate_rgb(name: str, a: np.ndarray, b: np.ndarray, border: int) -> MetricReport:
    """Full-color variant: PSNR over all channels jointly, SSIM averaged per
    channel.  (The luma path is the evaluation default.)"""
    ac = np.stack([crop_border(a[:, :, c], border) for c in range(3)], axis=2) * 255.0
    bc = np.stack([crop_border(b[:, :, c], border) for c in range(3)], axis=2) * 255.0
    ssim_rgb = float(np.mean([ssim(ac[:, :, c], bc[:, :, c]) for c in range(3)]))
    return MetricReport(name, psnr(ac, bc), ssim_rgb, border)


def write_metrics_csv(path, reports: Iterable[MetricReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "psnr_db", "ssim"])
        for r in reports:
            writer.writerow([r.name, repr(psnr_display(r.psnr_db)), repr(r.ssim)])
