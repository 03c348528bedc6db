"""Loss, optimizer, training loop and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import struct
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO

import numpy as np

from . import numerics as nx
from .dataset import WindowDataset
from .encoding import Normalizer, fit_normalizer
from .model import ForwardResult, Model, ModelConfig, forward, init_params
from .numerics import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MSGAF"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lambda_kl: float = 0.01
    kl_epsilon: float = 1e-8
    batch_size: int = 32

    def __post_init__(self):
        if not np.isfinite(self.lambda_kl) or self.lambda_kl < 0:
            raise ValueError("lambda_kl must be finite and >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for the diversity term")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 500
    patience: int = 20
    seed: int = 0
    percentile: int = 90
    loss: LossConfig = field(default_factory=LossConfig)


def mse_loss(predictions, targets) -> Tensor:
    predictions, targets = nx.as_tensor(predictions), nx.as_tensor(targets)
    if predictions.shape != targets.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {targets.shape}")
    if predictions.value.size < 1:
        raise ValueError("mse_loss needs at least one sample")
    diff = predictions - targets
    return nx.mean(diff * diff)


def kl_diversity(expert_outputs, cfg: LossConfig | None = None) -> Tensor:
    """Negative mean pairwise KL between the experts' batch profiles.

    Each expert's N outputs are turned into a distribution over the batch by a
    softmax along the batch axis. Returns a value <= 0.
    """
    cfg = cfg or LossConfig()
    E = nx.as_tensor(expert_outputs)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ValueError(f"need an N x K matrix with N >= 2, got shape {E.shape}")
    K = E.shape[1]
    if K < 2:
        return nx.Tensor(0.0)
    P = nx.softmax(E, axis=0)
    logP = nx.log(P + cfg.kl_epsilon)
    # sum_{i != j} KL(P_i || P_j) = sum_n [K sum_i P_i logP_i - (sum_i P_i)(sum_j logP_j)]
    self_term = nx.sum(P * logP) * float(K)
    cross = nx.sum(nx.sum(P, axis=1) * nx.sum(logP, axis=1))
    return (self_term - cross) * (-1.0 / (K * (K - 1)))


def total_loss(config: ModelConfig, params, X, A, y, cfg: LossConfig) -> tuple[Tensor, ForwardResult]:
    res = forward(config, params, X, A)
    loss = mse_loss(res.L_hat, y)
    if cfg.lambda_kl > 0 and res.expert_outputs.shape[-1] > 1:
        loss = loss + kl_diversity(res.expert_outputs, cfg) * cfg.lambda_kl
    return loss, res


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray | None]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        last = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], last])
    return chunks


def predict_scaled(config: ModelConfig, params, X: np.ndarray, A: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate([
        forward(config, params, X[i:i + chunk], A).L_hat.value for i in range(0, len(X), chunk)
    ])


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    normalizer: Normalizer
    target_scale: float
    meta: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.digest()

    def model(self) -> Model:
        return Model(self.config, self.params, self.normalizer, self.target_scale)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]


def train(
    dataset: WindowDataset,
    model_config: ModelConfig,
    cfg: TrainConfig | None = None,
    log_file: IO[str] | None = None,
) -> TrainResult:
    """Fit on the chronological 70% split, early-stopping on the next 15%.

    Returns the checkpoint with the best validation MSE.
    """
    cfg = cfg or TrainConfig()
    train_set, val_set, _ = dataset.split()
    if len(train_set) < 2 or len(val_set) < 1:
        raise ValueError(f"dataset of {len(dataset)} windows is too small to split")
    if model_config.n_nodes != dataset.graph.n:
        raise ValueError(f"model expects {model_config.n_nodes} services, data has {dataset.graph.n}")

    normalizer = fit_normalizer(list(train_set.X))
    y_train = train_set.targets[cfg.percentile]
    target_scale = float(np.mean(y_train))
    if not target_scale > 0:
        raise ValueError("training targets must have a positive mean")
    X_train = normalizer.apply(train_set.X)
    X_val = normalizer.apply(val_set.X)
    y_train_s = y_train / target_scale
    y_val_s = val_set.targets[cfg.percentile] / target_scale
    A = dataset.A

    params = init_params(model_config, np.random.default_rng([cfg.seed, 0]))
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)

    best = {"val": np.inf, "epoch": -1, "params": {k: v.copy() for k, v in params.items()}}
    history = []
    stale = 0
    for epoch in range(cfg.max_epochs):
        losses = []
        for idx in _batches(len(X_train), cfg.loss.batch_size, shuffle_rng):
            tape = nx.Tape()
            watched = tape.watch(params)
            try:
                loss, _ = total_loss(model_config, watched, X_train[idx], A, y_train_s[idx], cfg.loss)
            except nx.NonFiniteError as exc:
                raise _nan_error(epoch, params) from exc
            if not np.isfinite(loss.value):
                raise _nan_error(epoch, params)
            tape.backward(loss)
            opt.step(params, {k: t.grad for k, t in watched.items()})
            losses.append(float(loss.value))
        val_mse = float(np.mean((predict_scaled(model_config, params, X_val, A) - y_val_s) ** 2))
        if not np.isfinite(val_mse):
            raise _nan_error(epoch, params)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_mse, "lr": cfg.lr}
        history.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry) + "\n")
        if val_mse < best["val"]:
            best = {"val": val_mse, "epoch": epoch, "params": {k: v.copy() for k, v in params.items()}}
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    log.info("stopped after %d epochs, best epoch %d (val %.5g)", len(history), best["epoch"], best["val"])

    meta = {
        "seed": cfg.seed,
        "epoch": best["epoch"],
        "epochs_run": len(history),
        "val_loss": best["val"],
        "percentile": cfg.percentile,
        "train": asdict(cfg),
    }
    ckpt = Checkpoint(model_config, best["params"], normalizer, target_scale, meta)
    return TrainResult(checkpoint=ckpt, history=history)


def _nan_error(epoch: int, params: Mapping[str, np.ndarray]) -> TrainingError:
    norms = {k: float(np.linalg.norm(v)) for k, v in params.items()}
    return TrainingError(f"non-finite loss at epoch {epoch}; parameter norms {norms}")


# -- checkpoint file -------------------------------------------------------------
# b"MSGAF" | u32 version | u32 len + config hash | u32 len + metadata JSON
# | u32 tensor count | per tensor: u32 name len, name, u32 rank, u64 dims, f64 LE values


def _write_blob(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_exact(fh, size: int) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_blob(fh) -> bytes:
    (size,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, size)


def _tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = dict(ckpt.params)
    out["normalizer.mean"] = ckpt.normalizer.mean
    out["normalizer.std"] = ckpt.normalizer.std
    out["target.scale"] = np.array([ckpt.target_scale])
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    meta = {"model": asdict(ckpt.config), "run": ckpt.meta}
    tensors = _tensors(ckpt)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_blob(fh, ckpt.config_hash.encode("ascii"))
        _write_blob(fh, json.dumps(meta, sort_keys=True).encode("utf-8"))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            _write_blob(fh, name.encode("utf-8"))
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exact(fh, len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        stored_hash = _read_blob(fh).decode("ascii")
        meta = json.loads(_read_blob(fh).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(count):
            name = _read_blob(fh).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    config = ModelConfig(**meta["model"])
    if config.digest() != stored_hash:
        raise CheckpointError("checkpoint config hash does not match its stored model config")
    if expected_hash is not None and stored_hash != expected_hash:
        raise CheckpointError(f"config hash mismatch: checkpoint {stored_hash[:12]}, run {expected_hash[:12]}")
    normalizer = Normalizer(mean=tensors.pop("normalizer.mean"), std=tensors.pop("normalizer.std"))
    target_scale = float(tensors.pop("target.scale")[0])
    return Checkpoint(config, tensors, normalizer, target_scale, meta["run"])
