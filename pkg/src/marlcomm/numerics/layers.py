"""Neural network layers built on :mod:`marlcomm.numerics.tensor`.

All layers accept either a single example or a leading batch axis:

- :func:`linear`             ``x[in]`` or ``x[B, in]``
- :func:`conv2d`             ``x[C, H, W]`` or ``x[B, C, H, W]``, 3x3 kernels,
                             stride 1, zero padding 1 (spatial size preserved)
- :func:`gru_step`           ``x[in]``/``h[hid]`` or batched
- :func:`spectral_normalize` weight matrix divided by its power-iteration
                             estimate of the top singular value
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from marlcomm.numerics import tensor as T
from marlcomm.numerics.tensor import Tensor

logger = logging.getLogger(__name__)

KERNEL_SIZE = 3
SIGMA_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def init_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int
) -> np.ndarray:
    """Uniform weights in ``±sqrt(1 / fan_in)``."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape)


def init_linear(
    rng: np.random.Generator, out_features: int, in_features: int
) -> tuple[np.ndarray, np.ndarray]:
    """Weight ``[out, in]`` and zero bias ``[out]`` for :func:`linear`."""
    return (
        init_uniform(rng, (out_features, in_features), in_features),
        np.zeros(out_features),
    )


def init_conv(
    rng: np.random.Generator, out_channels: int, in_channels: int
) -> tuple[np.ndarray, np.ndarray]:
    """Kernels ``[F, C, 3, 3]`` and zero bias ``[F]`` for :func:`conv2d`."""
    fan_in = in_channels * KERNEL_SIZE * KERNEL_SIZE
    return (
        init_uniform(
            rng, (out_channels, in_channels, KERNEL_SIZE, KERNEL_SIZE), fan_in
        ),
        np.zeros(out_channels),
    )


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``y = W x + b``."""
    if weight.ndim != 2:
        raise ValueError(f"linear weight must be a matrix, got shape {weight.shape}")
    out_features, in_features = weight.shape
    if bias.shape != (out_features,):
        raise ValueError(
            f"linear bias shape {bias.shape} does not match weight {weight.shape}"
        )
    if x.ndim not in (1, 2) or x.shape[-1] != in_features:
        raise ValueError(
            f"linear input shape {x.shape} does not match weight {weight.shape}"
        )
    return T.matmul(x, T.transpose(weight)) + bias


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation with stride 1 and zero padding 1."""
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ValueError(f"conv2d input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2:] != (KERNEL_SIZE, KERNEL_SIZE):
        raise ValueError(f"conv2d kernels must be [F,C,3,3], got {kernels.shape}")
    xd = x.data if batched else x.data[None]
    _, channels, height, width = xd.shape
    n_filters = kernels.shape[0]
    if kernels.shape[1] != channels:
        raise ValueError(
            f"conv2d kernels expect {kernels.shape[1]} channels, input has {channels}"
        )
    if bias.shape != (n_filters,):
        raise ValueError(f"conv2d bias must be [{n_filters}], got {bias.shape}")

    padded = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = sliding_window_view(padded, (KERNEL_SIZE, KERNEL_SIZE), axis=(2, 3))
    kd = kernels.data
    out = np.einsum("bchwij,fcij->bfhw", patches, kd) + bias.data[None, :, None, None]

    def vjp(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        gb_ = g if batched else g[None]
        grad_kernels = np.einsum("bchwij,bfhw->fcij", patches, gb_)
        grad_bias = gb_.sum(axis=(0, 2, 3))
        grad_patches = np.einsum("bfhw,fcij->bchwij", gb_, kd)
        grad_padded = np.zeros(padded.shape)
        for i in range(KERNEL_SIZE):
            for j in range(KERNEL_SIZE):
                grad_padded[:, :, i : i + height, j : j + width] += grad_patches[
                    ..., i, j
                ]
        grad_x = grad_padded[:, :, 1:-1, 1:-1]
        return (grad_x if batched else grad_x[0]), grad_kernels, grad_bias

    return T.custom_op(out if batched else out[0], (x, kernels, bias), vjp)


@dataclass(frozen=True)
class GRUParams:
    """Gate weights stacked in (reset, update, candidate) order.

    ``w_ih[3H, in]``, ``w_hh[3H, H]``, ``b_ih[3H]``, ``b_hh[3H]``.
    """

    w_ih: Tensor
    w_hh: Tensor
    b_ih: Tensor
    b_hh: Tensor


def init_gru(
    rng: np.random.Generator, input_size: int, hidden_size: int
) -> dict[str, np.ndarray]:
    return {
        "w_ih": init_uniform(rng, (3 * hidden_size, input_size), input_size),
        "w_hh": init_uniform(rng, (3 * hidden_size, hidden_size), hidden_size),
        "b_ih": np.zeros(3 * hidden_size),
        "b_hh": np.zeros(3 * hidden_size),
    }


def gru_step(x: Tensor, h: Tensor, params: GRUParams) -> Tensor:
    """One GRU update ``h' = (1 - z) * n + z * h``."""
    hidden = h.shape[-1]
    if params.w_hh.shape != (3 * hidden, hidden):
        raise ValueError(
            f"GRU hidden weight {params.w_hh.shape} does not match state {h.shape}"
        )
    gi = linear(x, params.w_ih, params.b_ih)
    gh = linear(h, params.w_hh, params.b_hh)
    r = T.sigmoid(gi[..., :hidden] + gh[..., :hidden])
    z = T.sigmoid(gi[..., hidden : 2 * hidden] + gh[..., hidden : 2 * hidden])
    n = T.tanh(gi[..., 2 * hidden :] + r * gh[..., 2 * hidden :])
    return (1.0 - z) * n + z * h


# ---------------------------------------------------------------------------
# Spectral normalisation
# ---------------------------------------------------------------------------


@dataclass
class SpectralState:
    """Left singular-vector estimate ``u`` (unit norm) for one weight matrix."""

    u: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, rows: int) -> SpectralState:
        u = rng.standard_normal(rows)
        return cls(u=u / np.linalg.norm(u))

    def copy(self) -> SpectralState:
        return SpectralState(u=self.u.copy())


def spectral_normalize(
    weight: Tensor, state: SpectralState, iters: int = 1, update: bool = True
) -> Tensor:
    """Return ``W / sigma`` where sigma is the power-iteration top singular value.

    The singular vectors are treated as constants, so the gradient is the
    usual one for spectral normalisation. A zero matrix is returned unchanged.
    With ``update=False`` the persisted ``state.u`` is left untouched.
    """
    if weight.ndim != 2:
        raise ValueError(f"spectral_normalize expects a matrix, got {weight.shape}")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    w = weight.data
    if state.u.shape != (w.shape[0],):
        raise ValueError(
            f"spectral state u has shape {state.u.shape}, weight is {w.shape}"
        )
    u = state.u
    v = np.zeros(w.shape[1])
    for _ in range(iters):
        v = w.T @ u
        v_norm = np.linalg.norm(v)
        if v_norm < SIGMA_FLOOR:
            return weight
        v = v / v_norm
        u = w @ v
        u_norm = np.linalg.norm(u)
        if u_norm < SIGMA_FLOOR:
            return weight
        u = u / u_norm
    if update:
        state.u = u
    sigma = T.sum(weight * np.outer(u, v))
    if sigma.data < SIGMA_FLOOR:
        return weight
    return weight / sigma
