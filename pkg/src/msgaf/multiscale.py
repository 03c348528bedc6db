"""Learnable soft coarsening and the micro/meso/macro level bundle."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

# Divisors of n giving k per level; 1 is the micro level (k = n, no coarsening).
LEVEL_SCHEDULES: dict[int, tuple[int, ...]] = {
    1: (1,),
    2: (1, 4),
    3: (1, 4, 8),
    4: (1, 2, 4, 8),
}
LEVEL_NAMES = {1: "micro", 2: "meso_fine", 4: "meso", 8: "macro"}


def level_sizes(n: int, schedule: Sequence[int] = LEVEL_SCHEDULES[3]) -> list[int]:
    return [n if div == 1 else max(1, n // div) for div in schedule]


def level_names(schedule: Sequence[int]) -> list[str]:
    return [LEVEL_NAMES.get(div, f"div{div}") for div in schedule]


@dataclass
class ScaleBundle:
    level: str
    k: int
    P: Tensor
    X_c: Tensor
    A_c: Tensor


def assignment(X, W_p, b_p) -> Tensor:
    """Row-stochastic soft assignment ``softmax(X W_p + b_p)`` of shape n x k."""
    X, W_p, b_p = nx.as_tensor(X), nx.as_tensor(W_p), nx.as_tensor(b_p)
    if X.shape[-1] != W_p.shape[0]:
        raise ShapeError(f"features {X.shape} do not match W_p {W_p.shape}")
    if b_p.shape[-1] != W_p.shape[1]:
        raise ShapeError(f"b_p {b_p.shape} does not match W_p {W_p.shape}")
    return nx.row_softmax(X @ W_p + b_p)


def coarsen(X, A, P) -> tuple[Tensor, Tensor]:
    """``X_c = P^T X`` and ``A_c = P^T A P``."""
    X, A, P = nx.as_tensor(X), nx.as_tensor(A), nx.as_tensor(P)
    n = P.shape[-2]
    if X.shape[-2] != n or A.shape[-2:] != (n, n):
        raise ShapeError(f"coarsen shapes disagree: X {X.shape}, A {A.shape}, P {P.shape}")
    Pt = nx.transpose(P)
    return Pt @ X, Pt @ A @ P


def build_levels(
    X,
    A,
    params: Mapping[str, Tensor],
    schedule: Sequence[int] = LEVEL_SCHEDULES[3],
) -> list[ScaleBundle]:
    """One bundle per scheduled level, each coarsened from the original graph.

    ``params`` holds ``coarsen{l}.W`` and ``coarsen{l}.b`` for every level index
    ``l`` whose divisor is not 1. Works with or without a leading batch axis.
    """
    X, A = nx.as_tensor(X), nx.as_tensor(A)
    n = X.shape[-2]
    bundles = []
    for idx, (div, k) in enumerate(zip(schedule, level_sizes(n, schedule))):
        name = level_names(schedule)[idx]
        if div == 1:
            P = nx.Tensor(np.broadcast_to(np.eye(n), X.shape[:-2] + (n, n)))
            bundles.append(ScaleBundle(name, n, P, X, A))
            continue
        P = assignment(X, params[f"coarsen{idx}.W"], params[f"coarsen{idx}.b"])
        X_c, A_c = coarsen(X, A, P)
        bundles.append(ScaleBundle(name, k, P, X_c, A_c))
    return bundles
