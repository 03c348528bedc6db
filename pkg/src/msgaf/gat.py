"""Single-head graph attention per level, followed by mean pooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

EDGE_THRESHOLD = 1e-6


@dataclass(frozen=True)
class Neighborhood:
    """Boolean mask ``mask[..., i, j]``: j attends into i. Self-loops always set."""

    mask: np.ndarray

    @classmethod
    def from_adjacency(cls, A_c) -> Neighborhood:
        a = A_c.value if isinstance(A_c, Tensor) else np.asarray(A_c, dtype=np.float64)
        k = a.shape[-1]
        return cls(mask=(a > EDGE_THRESHOLD) | np.eye(k, dtype=bool))

    def indices(self) -> list[list[int]]:
        if self.mask.ndim != 2:
            raise ValueError("indices() is only defined for a single graph")
        return [list(map(int, np.nonzero(row)[0])) for row in self.mask]


def embed(X_c, W_embed) -> Tensor:
    X_c, W_embed = nx.as_tensor(X_c), nx.as_tensor(W_embed)
    if X_c.shape[-1] != W_embed.shape[0]:
        raise ShapeError(f"X_c {X_c.shape} does not match W_embed {W_embed.shape}")
    return X_c @ W_embed


def attention_scores(H, W_attn, a, nbh: Neighborhood) -> Tensor:
    """Dense attention matrix ``alpha[..., i, j]``, zero outside the neighborhood.

    ``a`` has length 2 d'; its first half scores the target node i and its
    second half scores the neighbor j.
    """
    H, W_attn, a = nx.as_tensor(H), nx.as_tensor(W_attn), nx.as_tensor(a)
    d_out = W_attn.shape[1]
    if a.shape != (2 * d_out,):
        raise ShapeError(f"attention vector must have length {2 * d_out}, got {a.shape}")
    G = H @ W_attn
    a_self = nx.reshape(a[:d_out], (d_out, 1))
    a_nbr = nx.reshape(a[d_out:], (d_out, 1))
    e = nx.leaky_relu(G @ a_self + nx.transpose(G @ a_nbr))
    return nx.softmax(e, axis=-1, mask=nbh.mask)


def aggregate(H, alpha, W_attn) -> Tensor:
    """``h'_i = ELU(sum_j alpha_ij W h_j)`` in dense form."""
    return nx.elu(nx.as_tensor(alpha) @ (nx.as_tensor(H) @ nx.as_tensor(W_attn)))


def pool(H_prime) -> Tensor:
    H_prime = nx.as_tensor(H_prime)
    if H_prime.shape[-2] < 1:
        raise ShapeError("cannot pool an empty node set")
    return nx.mean(H_prime, axis=-2)


@dataclass
class LevelOutput:
    alpha: Tensor
    H_prime: Tensor
    h: Tensor


def gat_level(X_c, A_c, W_embed, W_attn, a) -> LevelOutput:
    H = embed(X_c, W_embed)
    alpha = attention_scores(H, W_attn, a, Neighborhood.from_adjacency(A_c))
    H_prime = aggregate(H, alpha, W_attn)
    return LevelOutput(alpha=alpha, H_prime=H_prime, h=pool(H_prime))
