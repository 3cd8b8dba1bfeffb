"""Invertible image rescaling with dual latent variables."""

from .network import LatentSpec, RescaleModel, sample_latent
from .tensor import Parameter, Tape, Tensor

__all__ = [
    "LatentSpec",
    "Parameter",
    "RescaleModel",
    "Tape",
    "Tensor",
    "sample_latent",
]

__version__ = "0.1.0"
