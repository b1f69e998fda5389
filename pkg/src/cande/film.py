"""Feature-wise linear modulation (FiLM).

A context vector ``h`` is mapped to a per-feature scale and shift for every
conditioned layer by one affine map each::

    gamma_k = h @ W_gamma_k + b_gamma_k
    beta_k  = h @ W_beta_k  + b_beta_k

and the layer's pre-activation is modulated elementwise as
``gamma_k * z_k + beta_k`` before the nonlinearity is applied.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass
class FiLMPair:
    """Scale and shift generators for a single conditioned layer."""

    gamma_weight: np.ndarray  # (p, q)
    gamma_bias: np.ndarray  # (q,)
    beta_weight: np.ndarray  # (p, q)
    beta_bias: np.ndarray  # (q,)

    def __post_init__(self):
        p, q = self.gamma_weight.shape
        if self.beta_weight.shape != (p, q):
            raise ShapeError(f"beta weight {self.beta_weight.shape} != gamma weight {(p, q)}")
        if self.gamma_bias.shape != (q,) or self.beta_bias.shape != (q,):
            raise ShapeError(f"FiLM biases must have shape ({q},)")

    @property
    def context_dim(self) -> int:
        return self.gamma_weight.shape[0]

    @property
    def width(self) -> int:
        return self.gamma_weight.shape[1]


@dataclass
class FiLMGenerator:
    """One :class:`FiLMPair` per conditioned layer, keyed by layer index."""

    context_dim: int
    pairs: dict[int, FiLMPair] = field(default_factory=dict)

    def __post_init__(self):
        for k, pair in self.pairs.items():
            if pair.context_dim != self.context_dim:
                raise ShapeError(
                    f"generator for layer {k} expects context dim {pair.context_dim}, "
                    f"not {self.context_dim}"
                )

    @property
    def layers(self) -> list[int]:
        return sorted(self.pairs)

    def widths(self) -> dict[int, int]:
        return {k: self.pairs[k].width for k in self.layers}


def init_film(rng: np.random.Generator, context_dim: int, widths: dict[int, int],
              dtype=np.float32) -> FiLMGenerator:
    """Glorot-uniform generator weights, ``b_gamma = 1`` and ``b_beta = 0``.

    At initialisation the modulation is therefore ``gamma = 1 + h @ W_gamma``;
    zeroing the weights gives exact identity conditioning.
    """
    pairs = {}
    for k in sorted(widths):
        q = widths[k]
        limit = np.sqrt(6.0 / (context_dim + q))
        pairs[k] = FiLMPair(
            gamma_weight=rng.uniform(-limit, limit, size=(context_dim, q)).astype(dtype),
            gamma_bias=np.ones(q, dtype=dtype),
            beta_weight=rng.uniform(-limit, limit, size=(context_dim, q)).astype(dtype),
            beta_bias=np.zeros(q, dtype=dtype),
        )
    return FiLMGenerator(context_dim, pairs)


def identity_film(context_dim: int, widths: dict[int, int], dtype=np.float32) -> FiLMGenerator:
    pairs = {
        k: FiLMPair(
            gamma_weight=np.zeros((context_dim, q), dtype=dtype),
            gamma_bias=np.ones(q, dtype=dtype),
            beta_weight=np.zeros((context_dim, q), dtype=dtype),
            beta_bias=np.zeros(q, dtype=dtype),
        )
        for k, q in sorted(widths.items())
    }
    return FiLMGenerator(context_dim, pairs)


def film_params(gen: FiLMGenerator, h: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(gamma_k, beta_k)`` for context vector(s) ``h``.

    ``h`` may be a single vector of length p or a batch of shape (n, p); the
    outputs follow the same leading shape.
    """
    if k not in gen.pairs:
        raise KeyError(f"layer {k} is not conditioned (conditioned layers: {gen.layers})")
    h = np.asarray(h)
    if h.shape[-1] != gen.context_dim:
        raise ShapeError(f"context vector has length {h.shape[-1]}, generator expects {gen.context_dim}")
    pair = gen.pairs[k]
    gamma = h @ pair.gamma_weight + pair.gamma_bias
    beta = h @ pair.beta_weight + pair.beta_bias
    return gamma, beta


def film_apply(z: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if z.shape[-1] != gamma.shape[-1] or z.shape[-1] != beta.shape[-1]:
        raise ShapeError(
            f"feature widths disagree: z {z.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    return gamma * z + beta


@dataclass
class FiLMGrads:
    z: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    gamma_weight: np.ndarray
    gamma_bias: np.ndarray
    beta_weight: np.ndarray
    beta_bias: np.ndarray
    h: np.ndarray


def film_backward(grad_out: np.ndarray, z: np.ndarray, gamma: np.ndarray,
                  h: np.ndarray, pair: FiLMPair) -> FiLMGrads:
    """Back-propagate ``grad_out`` (dL/d modulated pre-activation) through FiLM.

    ``grad_out`` must already carry the nonlinearity's mask. ``z``, ``gamma``
    and ``h`` are the values cached by the forward pass; ``h`` is either a
    single vector shared by the whole batch or one row per example.
    """
    if grad_out.shape != z.shape:
        raise ShapeError(f"upstream grad {grad_out.shape} does not match cached z {z.shape}")
    d_gamma = grad_out * z
    d_beta = grad_out
    h2 = np.broadcast_to(h, (z.shape[0], h.shape[-1])) if z.ndim == 2 else h
    if z.ndim == 2:
        d_gamma_weight = h2.T @ d_gamma
        d_beta_weight = h2.T @ d_beta
        d_gamma_bias = d_gamma.sum(axis=0)
        d_beta_bias = d_beta.sum(axis=0)
    else:
        d_gamma_weight = np.outer(h2, d_gamma)
        d_beta_weight = np.outer(h2, d_beta)
        d_gamma_bias = d_gamma
        d_beta_bias = d_beta
    d_h = d_gamma @ pair.gamma_weight.T + d_beta @ pair.beta_weight.T
    return FiLMGrads(
        z=grad_out * gamma,
        gamma=d_gamma,
        beta=d_beta,
        gamma_weight=d_gamma_weight,
        gamma_bias=d_gamma_bias,
        beta_weight=d_beta_weight,
        beta_bias=d_beta_bias,
        h=d_h,
    )
