"""Dense tensor math with reverse-mode differentiation, layers and Adam."""

from marlcomm.numerics.layers import (
    GRUParams,
    SpectralState,
    conv2d,
    gru_step,
    linear,
    spectral_normalize,
)
from marlcomm.numerics.optim import Adam, AdamState, adam_step
from marlcomm.numerics.serialize import load_params, save_params
from marlcomm.numerics.tensor import GradTape, Tensor, backward, detach

__all__ = [
    "Adam",
    "AdamState",
    "GRUParams",
    "GradTape",
    "SpectralState",
    "Tensor",
    "adam_step",
    "backward",
    "conv2d",
    "detach",
    "gru_step",
    "linear",
    "load_params",
    "save_params",
    "spectral_normalize",
]
