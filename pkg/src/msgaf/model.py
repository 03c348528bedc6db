"""Parameter layout and forward pass of the full estimator."""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .encoding import FEATURE_COLUMNS, N_FEATURES, SCHEMA_VERSION, Normalizer
from .fusion import fuse
from .gat import LevelOutput, gat_level
from .multiscale import LEVEL_SCHEDULES, ScaleBundle, build_levels, level_sizes
from .numerics import Tensor
from .scene import estimate

VARIANTS = ("full", "no_multiscale", "no_fusion", "no_scene")


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    hidden: int = 64
    out_dim: int = 64
    scene_hidden: int = 64
    scene_dim: int = 32
    expert_hidden: int = 64
    n_experts: int = 4
    levels: int = 3
    variant: str = "full"
    n_features: int = N_FEATURES

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.levels not in LEVEL_SCHEDULES:
            raise ValueError(f"levels must be one of {sorted(LEVEL_SCHEDULES)}, got {self.levels}")
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")

    @property
    def schedule(self) -> tuple[int, ...]:
        if self.variant == "no_multiscale":
            return LEVEL_SCHEDULES[1]
        return LEVEL_SCHEDULES[self.levels]

    @property
    def experts(self) -> int:
        return 1 if self.variant == "no_scene" else self.n_experts

    def digest(self) -> str:
        payload = {
            "model": asdict(self),
            "schema_version": SCHEMA_VERSION,
            "features": list(FEATURE_COLUMNS),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _glorot(rng: np.random.Generator, *shape: int) -> np.ndarray:
    fan_in, fan_out = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter set. Insertion order is the canonical tensor order."""
    c = config
    p: dict[str, np.ndarray] = {}
    sizes = level_sizes(c.n_nodes, c.schedule)
    for idx, (div, k) in enumerate(zip(c.schedule, sizes)):
        if div != 1:
            p[f"coarsen{idx}.W"] = _glorot(rng, c.n_features, k)
            p[f"coarsen{idx}.b"] = np.zeros(k)
        p[f"gat{idx}.W_embed"] = _glorot(rng, c.n_features, c.hidden)
        p[f"gat{idx}.W_attn"] = _glorot(rng, c.hidden, c.out_dim)
        p[f"gat{idx}.a"] = _glorot(rng, 1, 2 * c.out_dim).reshape(-1)
    if c.variant != "no_fusion":
        p["fusion.W"] = _glorot(rng, 1, c.out_dim)
        p["fusion.b"] = np.zeros(1)
    K = c.experts
    if c.variant != "no_scene":
        p["scene.W1"] = _glorot(rng, c.out_dim, c.scene_hidden)
        p["scene.b1"] = np.zeros(c.scene_hidden)
        p["scene.W2"] = _glorot(rng, c.scene_hidden, c.scene_dim)
        p["scene.b2"] = np.zeros(c.scene_dim)
        p["gate.W"] = _glorot(rng, c.scene_dim, K)
        p["gate.b"] = np.zeros(K)
    p["experts.W1"] = _glorot(rng, K, c.out_dim, c.expert_hidden)
    p["experts.b1"] = np.zeros((K, 1, c.expert_hidden))
    p["experts.W2"] = _glorot(rng, K, c.expert_hidden, 1)
    # Targets are scaled to mean 1, so experts start near the mean.
    p["experts.b2"] = np.ones((K, 1, 1))
    return p


@dataclass
class ForwardResult:
    L_hat: Tensor  # (B,)
    beta: Tensor  # (B, L)
    omega: Tensor  # (B, K)
    expert_outputs: Tensor  # (B, K)
    bundles: list[ScaleBundle] = field(default_factory=list)
    levels: list[LevelOutput] = field(default_factory=list)


def forward(config: ModelConfig, params: Mapping, X, A) -> ForwardResult:
    """Run the estimator on features ``X`` (B x n x 9, already normalized)."""
    params = {k: nx.as_tensor(v) for k, v in params.items()}
    bundles = build_levels(X, A, params, config.schedule)
    levels = [
        gat_level(b.X_c, b.A_c, params[f"gat{i}.W_embed"], params[f"gat{i}.W_attn"],
                  params[f"gat{i}.a"])
        for i, b in enumerate(bundles)
    ]
    fused = fuse(
        [lv.h for lv in levels],
        params.get("fusion.W"),
        params.get("fusion.b"),
        uniform=config.variant == "no_fusion",
    )
    out = estimate(fused.f, params)
    return ForwardResult(
        L_hat=out.L_hat,
        beta=fused.beta,
        omega=out.omega,
        expert_outputs=out.expert_outputs,
        bundles=bundles,
        levels=levels,
    )


@dataclass
class Model:
    """Trained parameters plus the input and target scaling they expect."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    normalizer: Normalizer
    target_scale: float = 1.0

    def predict(self, X_raw: np.ndarray, A: np.ndarray) -> ForwardResult:
        """Forward pass on raw features; latency outputs are in milliseconds."""
        X_raw = np.asarray(X_raw, dtype=np.float64)
        X = self.normalizer.apply(X_raw[None] if X_raw.ndim == 2 else X_raw)
        res = forward(self.config, self.params, X, A)
        res.L_hat = nx.Tensor(res.L_hat.value * self.target_scale)
        res.expert_outputs = nx.Tensor(res.expert_outputs.value * self.target_scale)
        return res
