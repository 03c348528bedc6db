"""Scene recognizer, expert gate, and the mixture of expert estimators.

Vectors are row vectors (``(..., d)``), so ``W_s1`` maps ``f @ W_s1``. Expert
weights are stored stacked along a leading K axis: ``experts.W1`` is
K x d' x h_e, ``experts.b1`` K x 1 x h_e, ``experts.W2`` K x h_e x 1 and
``experts.b2`` K x 1 x 1.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass
class SceneOutput:
    s: Tensor | None
    omega: Tensor  # (..., K)
    expert_outputs: Tensor  # (..., K)
    L_hat: Tensor  # (...)


def recognize(f, params: Mapping[str, Tensor]) -> Tensor:
    hidden = nx.relu(nx.as_tensor(f) @ params["scene.W1"] + params["scene.b1"])
    return hidden @ params["scene.W2"] + params["scene.b2"]


def gate(s, params: Mapping[str, Tensor]) -> Tensor:
    return nx.softmax(nx.as_tensor(s) @ params["gate.W"] + params["gate.b"], axis=-1)


def n_experts(params: Mapping[str, Tensor]) -> int:
    return params["experts.W1"].shape[0]


def expert(i: int, x, params: Mapping[str, Tensor]) -> Tensor:
    """Output of expert ``i`` (0-based) for input ``x``; non-negative."""
    K = n_experts(params)
    if not 0 <= i < K:
        raise IndexError(f"expert index {i} outside [0, {K})")
    W1, W2 = params["experts.W1"][i], params["experts.W2"][i]
    b1 = nx.reshape(params["experts.b1"][i], (W1.shape[1],))
    b2 = nx.reshape(params["experts.b2"][i], (1,))
    out = nx.relu(nx.relu(nx.as_tensor(x) @ W1 + b1) @ W2 + b2)
    return nx.reshape(out, out.shape[:-1])


def all_experts(x, params: Mapping[str, Tensor]) -> Tensor:
    """Every expert at once, shape (..., K)."""
    x = nx.as_tensor(x)
    lead = x.shape[:-1]
    flat = nx.reshape(x, (1, int(np.prod(lead, dtype=int)), x.shape[-1]))
    hidden = nx.relu(flat @ params["experts.W1"] + params["experts.b1"])  # (K, B, h_e)
    out = nx.relu(hidden @ params["experts.W2"] + params["experts.b2"])  # (K, B, 1)
    K = out.shape[0]
    out = nx.transpose(nx.reshape(out, (K, out.shape[1])))  # (B, K)
    return nx.reshape(out, lead + (K,))


def estimate(f, params: Mapping[str, Tensor]) -> SceneOutput:
    """``L_hat = sum_i omega_i E_i(f)``.

    Without gate parameters (single-expert ablation) the lone expert output is
    the estimate.
    """
    outputs = all_experts(f, params)
    if "gate.W" not in params:
        omega = nx.Tensor(np.ones(outputs.shape))
        return SceneOutput(s=None, omega=omega, expert_outputs=outputs,
                           L_hat=nx.reshape(outputs, outputs.shape[:-1]))
    s = recognize(f, params)
    omega = gate(s, params)
    return SceneOutput(s=s, omega=omega, expert_outputs=outputs,
                       L_hat=nx.sum(omega * outputs, axis=-1))
