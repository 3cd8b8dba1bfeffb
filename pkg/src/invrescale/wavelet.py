"""Orthonormal 2-D Haar analysis/synthesis (the invertible downsampler).

Each 2x2 block [[a,b],[c,d]] maps to four coefficients divided by 2:

    LL = (a+b+c+d)/2   LH = (a-b+c-d)/2   HL = (a+b-c-d)/2   HH = (a-b-c+d)/2

The /2 normalization makes the transform orthonormal, so energy is
preserved and the inverse is the transpose (same formula applied to the
coefficients).  Output channels are grouped by subband: all C channels of
LL first, then LH, HL, HH; this order is frozen for checkpoint
compatibility.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, custom_op


def _haar_fwd_data(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    a = x[:, :, 0::2, 0::2]
    bb = x[:, :, 0::2, 1::2]
    cc = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    out = np.empty((b, 4 * c, h // 2, w // 2), dtype=x.dtype)
    out[:, 0 * c:1 * c] = (a + bb + cc + d) * 0.5
    out[:, 1 * c:2 * c] = (a - bb + cc - d) * 0.5
    out[:, 2 * c:3 * c] = (a + bb - cc - d) * 0.5
    out[:, 3 * c:4 * c] = (a - bb - cc + d) * 0.5
    return out


def _haar_inv_data(coeffs: np.ndarray) -> np.ndarray:
    b, c4, h, w = coeffs.shape
    c = c4 // 4
    ll = coeffs[:, 0 * c:1 * c]
    lh = coeffs[:, 1 * c:2 * c]
    hl = coeffs[:, 2 * c:3 * c]
    hh = coeffs[:, 3 * c:4 * c]
    out = np.empty((b, c, 2 * h, 2 * w), dtype=coeffs.dtype)
    out[:, :, 0::2, 0::2] = (ll + lh + hl + hh) * 0.5
    out[:, :, 0::2, 1::2] = (ll - lh + hl - hh) * 0.5
    out[:, :, 1::2, 0::2] = (ll + lh - hl - hh) * 0.5
    out[:, :, 1::2, 1::2] = (ll - lh - hl + hh) * 0.5
    return out


def haar_forward(x: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,4C,H/2,W/2); H and W must be even."""
    b, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"haar_forward: spatial size {h}x{w} must be even")
    # Orthonormal, so the adjoint (gradient) is the inverse transform.
    return custom_op(_haar_fwd_data(x.data), (x,), lambda g: (_haar_inv_data(g),))


def haar_inverse(coeffs: Tensor) -> Tensor:
    """(B,4C,h,w) -> (B,C,2h,2w); channel count must be divisible by 4."""
    b, c4, h, w = coeffs.data.shape
    if c4 % 4:
        raise ValueError(f"haar_inverse: channel count {c4} not divisible by 4")
    return custom_op(_haar_inv_data(coeffs.data), (coeffs,), lambda g: (_haar_fwd_data(g),))
