"""Gaussian-masked cross-attention shared by the dense and object probes."""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Linear, Module, Parameter, Tensor, div, reciprocal, softplus

SQRT_TWO_PI = math.sqrt(2.0 * math.pi)


def squared_distances(positions_a: np.ndarray, positions_b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between two (n, 2) position sets."""
    a = np.asarray(positions_a, dtype=np.float64)
    b = np.asarray(positions_b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=-1)


def image_to_feature_coords(positions: np.ndarray, image_size,
                            feature_size) -> np.ndarray:
    """Map image-space coordinates onto the feature grid's cell-center frame.

    Feature cell i sits at coordinate i in this frame; an image position x
    maps to (x + 0.5) * feature_side / image_side - 0.5, independently per
    axis. Sizes may be scalars or (rows, cols) pairs.
    """
    positions = np.asarray(positions, dtype=np.float64)
    img = np.broadcast_to(np.asarray(image_size, dtype=np.float64), (2,))
    feat = np.broadcast_to(np.asarray(feature_size, dtype=np.float64), (2,))
    return (positions + 0.5) * (feat / img)[None, :] - 0.5


def gaussian_attention_mask(positions_q: np.ndarray, positions_f: np.ndarray,
                            sigma: Tensor) -> Tensor:
    """Locality prior M[i, j] = exp(-d_ij^2 / (2 sigma)) / (sigma sqrt(2 pi)).

    d_ij is the Euclidean distance between query position i and feature
    position j, both expressed in feature-grid cell units. sigma is a
    positive scalar Tensor (shape () or (1,)); the mask is differentiable
    with respect to it. Note the divisor is 2*sigma, not 2*sigma^2.
    """
    d2 = Tensor(squared_distances(positions_q, positions_f),
                dtype=sigma.data.dtype)
    inv_two_sigma = reciprocal(sigma * 2.0)
    coef = reciprocal(sigma * SQRT_TWO_PI)
    return (-(d2 * inv_two_sigma)).exp() * coef


def sinusoidal_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos encoding of (n, 2) positions into (n, dim) vectors.

    Half the channels encode the row coordinate, half the column, each as
    interleaved sine and cosine over a geometric frequency ladder.
    """
    if dim % 4 != 0:
        raise ValueError(f"encoding dim must be divisible by 4, got {dim}")
    positions = np.asarray(positions, dtype=np.float64)
    quarter = dim // 4
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / quarter))
    parts = []
    for axis in (0, 1):
        phase = positions[:, axis:axis + 1] * freqs[None, :]
        parts.append(np.sin(phase))
        parts.append(np.cos(phase))
    return np.concatenate(parts, axis=1)


class GaussianMaskedCrossAttention(Module):
    """Multi-head cross-attention with a per-head learnable locality prior.

    Post-softmax attention weights are multiplied elementwise by the
    Gaussian mask and renormalized, so each query's weights stay on the
    simplex. Each head owns an unconstrained bandwidth parameter mapped
    through softplus, keeping sigma positive.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator,
                 sigma_init: float = 8.0, name: str = "attn"):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.query_proj = [Linear(dim, self.head_dim, rng, name=f"{name}.q{h}")
                           for h in range(heads)]
        # a key bias shifts every score in a row equally, which softmax
        # ignores; the parameter would be permanently gradient-free
        self.key_proj = [Linear(dim, self.head_dim, rng, bias=False, name=f"{name}.k{h}")
                         for h in range(heads)]
        self.value_proj = [Linear(dim, self.head_dim, rng, name=f"{name}.v{h}")
                           for h in range(heads)]
        self.out_proj = [Linear(self.head_dim, dim, rng, name=f"{name}.o{h}")
                         for h in range(heads)]
        # softplus(raw) == sigma_init at start
        raw = math.log(math.expm1(sigma_init))
        self.sigma_raw = [Parameter(np.full(1, raw), name=f"{name}.sigma{h}")
                          for h in range(heads)]

    def sigmas(self) -> list[Tensor]:
        return [softplus(p) for p in self.sigma_raw]

    def sigma_values(self) -> np.ndarray:
        return np.array([float(softplus(p).data) for p in self.sigma_raw])

    def forward(self, queries: Tensor, feats: Tensor,
                positions_q: np.ndarray, positions_f: np.ndarray) -> Tensor:
        out = None
        for h in range(self.heads):
            q = self.query_proj[h](queries)
            k = self.key_proj[h](feats)
            v = self.value_proj[h](feats)
            scores = (q @ k.transpose_last2()) * self.scale
            attn = scores.softmax()
            mask = gaussian_attention_mask(positions_q, positions_f,
                                           softplus(self.sigma_raw[h]))
            weighted = attn * mask
            weights = div(weighted, weighted.sum(axes=-1, keepdims=True))
            head_out = self.out_proj[h](weights @ v)
            out = head_out if out is None else out + head_out
        return out
