"""The four-term training objective plus 8-bit quantization with a
straight-through gradient.

Total = recon * L1(restored, original)
      + guide * L2(LR, bicubic reference)
      + dist  * mean(z^2)
      + invariance * RMS over pixels of the std of the LR across latent draws

The LR lives in display space (the low-frequency gain of the orthonormal
Haar stack divided out) for the guidance term, quantization, and the
invariance term, so those all see ordinary [0,1] images while the network
math stays orthonormal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import bicubic_downsample_batch
from .network import RescaleModel, sample_latent
from .tensor import Tensor, custom_op


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.0
    guide: float = 4.0
    dist: float = 1e-2
    invariance: float = 0.0
    samples: int = 3  # latent draws per step when the invariance term is on

    def __post_init__(self):
        for field in ("recon", "guide", "dist", "invariance"):
            if getattr(self, field) < 0:
                raise ValueError(f"loss weight {field} must be nonnegative")
        if self.samples < 2:
            raise ValueError("invariance needs at least 2 samples (divides by m-1)")

    @classmethod
    def defaults(cls, scale: int, invariance: bool = False) -> "LossWeights":
        """Reference weighting: guide = s^2, dist = 1e-2, invariance = s^2/4."""
        return cls(
            recon=1.0,
            guide=float(scale * scale),
            dist=1e-2,
            invariance=float(scale * scale) / 4.0 if invariance else 0.0,
            samples=3,
        )


def recon_loss(xhat: Tensor, x: Tensor) -> Tensor:
    """Mean absolute difference."""
    return T.reduce_mean(T.absolute(xhat - x))


def guidance_loss(y: Tensor, ybar: Tensor) -> Tensor:
    """Mean squared difference against the bicubic reference."""
    d = y - ybar
    return T.reduce_mean(T.mul(d, d))


def distribution_loss(z: Tensor) -> Tensor:
    """Mean of z^2 (negative log density of a standard normal, constants
    absorbed into the weight)."""
    return T.scale(T.reduce_sumsq(z), 1.0 / z.data.size)


def invariance_loss(y_samples: list[Tensor]) -> Tensor:
    """RMS over pixels of the per-pixel sample std across the m LR outputs:
    sqrt(mean_pixels(sum_j (y_j - mean)^2 / (m-1)))."""
    m = len(y_samples)
    if m < 2:
        raise ValueError(f"invariance loss needs m >= 2 samples, got {m}")
    inv_m = 1.0 / m
    mean = T.scale(y_samples[0], inv_m)
    for yj in y_samples[1:]:
        mean = mean + T.scale(yj, inv_m)
    acc = None
    for yj in y_samples:
        d = yj - mean
        sq = T.reduce_sum(T.mul(d, d))
        acc = sq if acc is None else acc + sq
    n = y_samples[0].data.size
    return T.sqrt(T.scale(acc, 1.0 / ((m - 1) * n)))


def quantize_ste(y: Tensor) -> Tensor:
    """8-bit quantization clip(round(255 y)/255, 0, 1); the gradient passes
    through unchanged where y is in [0,1] and is zero outside."""
    data = y.data
    out = np.clip(np.round(data * 255.0) / 255.0, 0.0, 1.0)
    mask = (data >= 0.0) & (data <= 1.0)
    return custom_op(out.astype(data.dtype), (y,), lambda g: (g * mask,))


def total_loss(model: RescaleModel, x: Tensor, weights: LossWeights,
               rng: np.random.Generator, quantize: bool = True):
    """One objective evaluation; returns (loss tensor, component floats).

    Draws the downscaling latents, runs the forward passes (m of them when
    the invariance term is active, one otherwise), then restores from the
    first LR output (quantized unless disabled) with a fresh upscaling
    latent and scores the four terms.
    """
    b, _, h, wid = x.data.shape
    gain = model.lf_gain
    dtype = x.dtype
    ybar = Tensor(bicubic_downsample_batch(x.data, model.scale).astype(x.data.dtype))

    m_eff = weights.samples if weights.invariance > 0 else 1
    cw = model.latent.channels
    y_imgs: list[Tensor] = []
    z1 = None
    for _ in range(m_eff):
        w_lat = None
        if cw > 0:
            w_lat = sample_latent(model.latent.w_mode, model.w_shape(h, wid, b), rng, dtype)
        y_j, z_j = model.forward(x, w_lat)
        if z1 is None:
            z1 = z_j
        y_imgs.append(T.scale(y_j, 1.0 / gain))

    l_guide = guidance_loss(y_imgs[0], ybar)
    l_dist = distribution_loss(z1)
    l_inv = invariance_loss(y_imgs) if m_eff >= 2 else None

    y_lr = quantize_ste(y_imgs[0]) if quantize else y_imgs[0]
    zhat = sample_latent(model.latent.zhat_mode, z1.data.shape, rng, dtype)
    xhat, _ = model.inverse(T.scale(y_lr, gain), zhat)
    l_recon = recon_loss(xhat, x)

    total = T.scale(l_recon, weights.recon) + T.scale(l_guide, weights.guide) \
        + T.scale(l_dist, weights.dist)
    if l_inv is not None:
        total = total + T.scale(l_inv, weights.invariance)

    components = {
        "recon": l_recon.item(),
        "guide": l_guide.item(),
        "dist": l_dist.item(),
        "invariance": l_inv.item() if l_inv is not None else 0.0,
        "total": total.item(),
    }
    return total, components
