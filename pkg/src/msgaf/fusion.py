"""Softmax-weighted fusion of per-level graph embeddings."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass
class FusedState:
    beta: Tensor  # (..., L)
    f: Tensor  # (..., d')


def fuse(embeddings: Sequence, W_beta=None, b_beta=None, uniform: bool = False) -> FusedState:
    """Weight each level by ``softmax_l(W_beta h_l + b_beta)`` and sum.

    ``W_beta`` has shape 1 x d'. With ``uniform=True`` the weights are fixed at
    1/L and the fusion parameters are ignored.
    """
    hs = [nx.as_tensor(h) for h in embeddings]
    dims = {h.shape for h in hs}
    if len(dims) != 1:
        raise ShapeError(f"level embeddings disagree in shape: {sorted(dims)}")
    L = len(hs)
    H = nx.stack(hs, axis=-2)  # (..., L, d')
    if uniform:
        beta = nx.Tensor(H.value[..., 0] * 0.0 + 1.0 / L)
    else:
        W_beta, b_beta = nx.as_tensor(W_beta), nx.as_tensor(b_beta)
        if W_beta.shape != (1, H.shape[-1]):
            raise ShapeError(f"W_beta must be (1, {H.shape[-1]}), got {W_beta.shape}")
        scores = H @ nx.transpose(W_beta) + b_beta  # (..., L, 1)
        beta = nx.softmax(nx.reshape(scores, scores.shape[:-1]), axis=-1)
    weights = nx.reshape(beta, beta.shape[:-1] + (1, L))
    f = weights @ H
    return FusedState(beta=beta, f=nx.reshape(f, f.shape[:-2] + (f.shape[-1],)))
