"""The invertible rescaling network.

Forward: concat the HR image with the per-pixel downscaling latent, then per
stage apply one Haar level to the whole tensor followed by K coupling blocks
that split 3 low-frequency channels from the mixture.  After n = log2(s)
stages the first 3 channels are the LR output y and the rest form the
upscaling latent z.  The inverse runs the exact algebraic reverse with the
same parameters, returning both the restored image and the recovered
downscaling latent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor
from .wavelet import haar_forward, haar_inverse

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class LatentSpec:
    """Dual-latent configuration: C_w channels of w plus sampling modes."""

    channels: int = 2          # w channels per HR pixel; 0 = single-latent baseline
    w_mode: str = "gaussian"   # zero | gaussian
    zhat_mode: str = "zero"    # zero | gaussian

    def __post_init__(self):
        if self.channels < 0:
            raise ValueError(f"latent channels must be >= 0, got {self.channels}")
        for mode in (self.w_mode, self.zhat_mode):
            if mode not in ("zero", "gaussian"):
                raise ValueError(f"unknown latent mode {mode!r}")


def sample_latent(mode: str, shape, rng: np.random.Generator, dtype: str = "f32") -> Tensor:
    """All-zeros or i.i.d. standard normal draws from the given generator."""
    np_dtype = T.DTYPES[dtype]
    if mode == "zero":
        return Tensor(np.zeros(shape, dtype=np_dtype))
    if mode == "gaussian":
        return Tensor(rng.standard_normal(shape).astype(np_dtype))
    raise ValueError(f"unknown latent mode {mode!r}")


class Conv:
    """One conv layer's parameters (weight + bias)."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 dtype: str, name: str, zero_init: bool = False):
        np_dtype = T.DTYPES[dtype]
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), dtype=np_dtype)
        else:
            # Fan-in scaled uniform with gain matching the leaky slope.
            fan_in = c_in * k * k
            bound = LEAKY_SLOPE * np.sqrt(3.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(np_dtype)
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out, dtype=np_dtype), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class DenseBlock:
    """Five 3x3 convs with dense skip concatenation; leaky-ReLU after the
    first four, final layer zero-initialized so the block starts as the zero
    map (which makes a fresh coupling block the identity)."""

    def __init__(self, c_in: int, c_out: int, growth: int, rng: np.random.Generator,
                 dtype: str, name: str):
        g = growth
        self.convs = [
            Conv(c_in + i * g, g, 3, rng, dtype, f"{name}.conv{i}") for i in range(4)
        ]
        self.convs.append(Conv(c_in + 4 * g, c_out, 3, rng, dtype, f"{name}.conv4",
                               zero_init=True))

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs[:-1]:
            h = conv(feats[0] if len(feats) == 1 else T.concat(feats))
            feats.append(T.leaky_relu(h, LEAKY_SLOPE))
        return self.convs[-1](T.concat(feats))

    def parameters(self) -> list[Parameter]:
        return T.parameters_of(self.convs)


class InvBlock:
    """Coupling block: additive update on the low-frequency branch, clamped
    affine update on the mixture branch.  Invertible for any weights; the
    per-element scale lies in [exp(-clamp), exp(clamp)]."""

    def __init__(self, lf_channels: int, mix_channels: int, growth: int,
                 clamp: float, rng: np.random.Generator, dtype: str, name: str):
        self.lf_channels = lf_channels
        self.mix_channels = mix_channels
        self.clamp = float(clamp)
        self.phi = DenseBlock(mix_channels, lf_channels, growth, rng, dtype, f"{name}.phi")
        self.rho = DenseBlock(lf_channels, mix_channels, growth, rng, dtype, f"{name}.rho")
        self.eta = DenseBlock(lf_channels, mix_channels, growth, rng, dtype, f"{name}.eta")

    def _log_scale(self, h1: Tensor) -> Tensor:
        # clamp * (2*sigmoid(rho(h1)) - 1), bounded to (-clamp, clamp)
        return T.scale(T.shift(T.sigmoid(self.rho(h1)), -0.5), 2.0 * self.clamp)

    def forward(self, h1: Tensor, h2: Tensor) -> tuple[Tensor, Tensor]:
        h1p = h1 + self.phi(h2)
        log_s = self._log_scale(h1p)
        h2p = h2 * T.exp(log_s) + self.eta(h1p)
        return h1p, h2p

    def inverse(self, h1p: Tensor, h2p: Tensor) -> tuple[Tensor, Tensor]:
        log_s = self._log_scale(h1p)
        h2 = (h2p - self.eta(h1p)) * T.exp(T.scale(log_s, -1.0))
        h1 = h1p - self.phi(h2)
        return h1, h2

    def parameters(self) -> list[Parameter]:
        return self.phi.parameters() + self.rho.parameters() + self.eta.parameters()


class RescaleModel:
    """Stage list (Haar + K coupling blocks per stage) with dual latents."""

    def __init__(self, scale: int = 2, latent: LatentSpec = LatentSpec(),
                 blocks_per_stage: int = 8, growth: int = 16, clamp: float = 1.0,
                 dtype: str = "f32", seed: int = 0):
        if scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {scale}")
        if blocks_per_stage < 1:
            raise ValueError("need at least one coupling block per stage")
        self.scale = scale
        self.stages = scale.bit_length() - 1  # log2
        self.latent = latent
        self.blocks_per_stage = blocks_per_stage
        self.growth = growth
        self.clamp = float(clamp)
        self.dtype = dtype
        self.seed = seed

        rng = np.random.default_rng(seed)
        self.stage_blocks: list[list[InvBlock]] = []
        channels = 3 + latent.channels
        for stage in range(self.stages):
            channels *= 4  # one Haar level
            blocks = [
                InvBlock(3, channels - 3, growth, clamp, rng, dtype,
                         f"stage{stage}.block{k}")
                for k in range(blocks_per_stage)
            ]
            self.stage_blocks.append(blocks)
        self._final_channels = channels

    # -- shape accounting -------------------------------------------------
    @property
    def z_channels(self) -> int:
        return self._final_channels - 3

    @property
    def lf_gain(self) -> float:
        """Gain the orthonormal Haar stack puts on the low-frequency branch
        (divide y by this for display; multiply back before inverting)."""
        return float(2 ** self.stages)

    def z_shape(self, h_hr: int, w_hr: int, batch: int = 1) -> tuple[int, int, int, int]:
        return (batch, self.z_channels, h_hr // self.scale, w_hr // self.scale)

    def w_shape(self, h_hr: int, w_hr: int, batch: int = 1) -> tuple[int, int, int, int]:
        return (batch, self.latent.channels, h_hr, w_hr)

    # -- bijection ---------------------------------------------------------
    def forward(self, x: Tensor, w: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        b, c, h, wid = x.data.shape
        if c != 3:
            raise ValueError(f"expected 3 input channels, got {c}")
        if h % self.scale or wid % self.scale:
            raise ValueError(
                f"spatial size {h}x{wid} not divisible by scale {self.scale}"
            )
        cw = self.latent.channels
        if cw == 0:
            if w is not None:
                raise ValueError("model has no downscaling latent but w was given")
            cur = x
        else:
            if w is None:
                raise ValueError(f"model expects a {cw}-channel downscaling latent")
            if w.data.shape != (b, cw, h, wid):
                raise ValueError(
                    f"latent shape {w.data.shape} != {(b, cw, h, wid)}"
                )
            cur = T.concat([x, w])
        for blocks in self.stage_blocks:
            cur = haar_forward(cur)
            for block in blocks:
                h1, h2 = T.split_channels(cur, 3)
                h1, h2 = block.forward(h1, h2)
                cur = T.concat([h1, h2])
        return T.split_channels(cur, 3)

    def inverse(self, y: Tensor, z: Tensor) -> tuple[Tensor, Optional[Tensor]]:
        if y.data.shape[1] != 3:
            raise ValueError(f"expected 3-channel LR input, got {y.data.shape[1]}")
        if z.data.shape[1] != self.z_channels or z.data.shape[2:] != y.data.shape[2:] \
                or z.data.shape[0] != y.data.shape[0]:
            raise ValueError(
                f"latent shape {z.data.shape} inconsistent with LR {y.data.shape} "
                f"(need {self.z_channels} channels at the LR resolution)"
            )
        cur = T.concat([y, z])
        for blocks in reversed(self.stage_blocks):
            for block in reversed(blocks):
                h1, h2 = T.split_channels(cur, 3)
                h1, h2 = block.inverse(h1, h2)
                cur = T.concat([h1, h2])
            cur = haar_inverse(cur)
        if self.latent.channels == 0:
            return cur, None
        return T.split_channels(cur, 3)

    # -- bookkeeping -------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for blocks in self.stage_blocks:
            for block in blocks:
                out.extend(block.parameters())
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def arch_config(self) -> dict:
        return {
            "scale": self.scale,
            "latent_channels": self.latent.channels,
            "w_mode": self.latent.w_mode,
            "zhat_mode": self.latent.zhat_mode,
            "blocks_per_stage": self.blocks_per_stage,
            "growth": self.growth,
            "clamp": self.clamp,
            "dtype": self.dtype,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "RescaleModel":
        return cls(
            scale=int(cfg["scale"]),
            latent=LatentSpec(int(cfg["latent_channels"]), cfg["w_mode"], cfg["zhat_mode"]),
            blocks_per_stage=int(cfg["blocks_per_stage"]),
            growth=int(cfg["growth"]),
            clamp=float(cfg["clamp"]),
            dtype=cfg["dtype"],
            seed=0,
        )
