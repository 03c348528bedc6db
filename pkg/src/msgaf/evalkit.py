"""Error metrics, structure-blind baselines, and the ablation / level sweeps."""

from __future__ import annotations

import itertools
import json
import logging
import math
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .dataset import WindowDataset
from .encoding import Normalizer, fit_normalizer
from .model import Model, ModelConfig
from .training import Adam, TrainConfig, TrainingError, mse_loss, train

log = logging.getLogger(__name__)

MAPE_EPS = 1e-6


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    mape: float
    percentile: int
    n_samples: int

    def as_dict(self) -> dict:
        return asdict(self)


def compute_metrics(preds, targets, percentile: int = 90) -> MetricReport:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.size == 0 or preds.shape != targets.shape:
        raise ValueError(f"need equal nonempty lengths, got {preds.size} and {targets.size}")
    err = preds - targets
    return MetricReport(
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err * err))),
        mape=float(100.0 * np.mean(np.abs(err) / np.maximum(targets, MAPE_EPS))),
        percentile=percentile,
        n_samples=int(preds.size),
    )


# -- per-sample evaluation -------------------------------------------------------


def predict_window(model: Model, X_raw: np.ndarray, A: np.ndarray) -> dict:
    """One window, one forward pass. Used by both evaluate and predict."""
    res = model.predict(X_raw, A)
    return {
        "L_hat": float(res.L_hat.value[0]),
        "beta": res.beta.value[0].tolist(),
        "omega": res.omega.value[0].tolist(),
        "expert_outputs": res.expert_outputs.value[0].tolist(),
    }


def evaluate_model(model: Model, data: WindowDataset, percentile: int) -> tuple[MetricReport, list[dict]]:
    """Metrics over ``data`` plus a log entry per window (beta, omega, experts)."""
    rows = []
    for i in range(len(data)):
        out = predict_window(model, data.X[i], data.A)
        out.update(
            window_id=int(data.window_ids[i]),
            scenario_kind=data.scenarios[i],
            target=float(data.targets[percentile][i]),
        )
        rows.append(out)
    preds = np.array([r["L_hat"] for r in rows])
    return compute_metrics(preds, data.targets[percentile], percentile), rows


# -- baselines -------------------------------------------------------------------


def pooled_features(X: np.ndarray) -> np.ndarray:
    """Column mean over services: (N, n, F) -> (N, F)."""
    return np.asarray(X, dtype=np.float64).mean(axis=-2)


@dataclass
class LinearRegressor:
    weights: np.ndarray
    intercept: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features) @ self.weights + self.intercept


def fit_linear(features: np.ndarray, targets: np.ndarray, ridge: float = 1e-6) -> LinearRegressor:
    """Ridge-stabilized ordinary least squares via the normal equations."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] < features.shape[1] + 1:
        raise ValueError(f"need at least {features.shape[1] + 1} samples, got {features.shape[0]}")
    design = np.column_stack([features, np.ones(len(features))])
    gram = design.T @ design + ridge * np.eye(design.shape[1])
    coef = np.linalg.solve(gram, design.T @ np.asarray(targets, dtype=np.float64))
    return LinearRegressor(weights=coef[:-1], intercept=float(coef[-1]))


@dataclass
class MLPRegressor:
    params: dict[str, np.ndarray]
    target_scale: float = 1.0

    def forward(self, features, params=None):
        p = params if params is not None else self.params
        h = nx.relu(nx.as_tensor(features) @ p["W1"] + p["b1"])
        h = nx.relu(h @ p["W2"] + p["b2"])
        out = h @ p["W3"] + p["b3"]
        return nx.reshape(out, out.shape[:-1])

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.forward(np.asarray(features, dtype=np.float64)).value * self.target_scale


def fit_mlp(
    features: np.ndarray,
    targets: np.ndarray,
    val_features: np.ndarray,
    val_targets: np.ndarray,
    cfg: TrainConfig | None = None,
    hidden: tuple[int, int] = (64, 64),
) -> MLPRegressor:
    """Two ReLU hidden layers, Adam, MSE, early stopping on the validation set."""
    cfg = cfg or TrainConfig()
    rng = np.random.default_rng([cfg.seed, 2])
    sizes = (features.shape[1],) + tuple(hidden) + (1,)
    params = {}
    for i, (a, b) in enumerate(itertools.pairwise(sizes), start=1):
        limit = math.sqrt(6.0 / (a + b))
        params[f"W{i}"] = rng.uniform(-limit, limit, (a, b))
        params[f"b{i}"] = np.zeros(b)
    scale = float(np.mean(np.abs(targets))) or 1.0
    model = MLPRegressor(params, target_scale=scale)
    y, y_val = np.asarray(targets) / scale, np.asarray(val_targets) / scale

    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    shuffle = np.random.default_rng([cfg.seed, 3])
    best, best_params, stale = np.inf, {k: v.copy() for k, v in params.items()}, 0
    for epoch in range(cfg.max_epochs):
        perm = shuffle.permutation(len(features))
        for start in range(0, len(perm), cfg.loss.batch_size):
            idx = perm[start:start + cfg.loss.batch_size]
            tape = nx.Tape()
            watched = tape.watch(params)
            loss = mse_loss(model.forward(features[idx], watched), y[idx])
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite MLP loss at epoch {epoch}")
            tape.backward(loss)
            opt.step(params, {k: t.grad for k, t in watched.items()})
        val = float(np.mean((model.forward(val_features, params).value - y_val) ** 2))
        if val < best:
            best, best_params, stale = val, {k: v.copy() for k, v in params.items()}, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.params = best_params
    return model


@dataclass
class BaselineModel:
    """A regressor over normalized, service-averaged features."""

    regressor: LinearRegressor | MLPRegressor
    normalizer: Normalizer

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.regressor.predict(pooled_features(self.normalizer.apply(X)))


def fit_linear_baseline(train_set: WindowDataset, percentile: int = 90) -> BaselineModel:
    norm = fit_normalizer(list(train_set.X))
    reg = fit_linear(pooled_features(norm.apply(train_set.X)), train_set.targets[percentile])
    return BaselineModel(reg, norm)


def fit_mlp_baseline(
    train_set: WindowDataset,
    val_set: WindowDataset,
    percentile: int = 90,
    cfg: TrainConfig | None = None,
) -> BaselineModel:
    cfg = cfg or TrainConfig()
    norm = fit_normalizer(list(train_set.X))
    reg = fit_mlp(
        pooled_features(norm.apply(train_set.X)), train_set.targets[percentile],
        pooled_features(norm.apply(val_set.X)), val_set.targets[percentile], cfg,
    )
    return BaselineModel(reg, norm)


# -- ablation and level sweep ------------------------------------------------------


@dataclass
class ResultTable:
    title: str
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> list[dict]:
        out = []
        for name in sorted({r["variant"] for r in self.rows}, key=_variant_key):
            sel = [r for r in self.rows if r["variant"] == name]
            entry = {"variant": name, "n_seeds": len(sel)}
            for metric in ("mae", "rmse", "mape"):
                vals = np.array([r[metric] for r in sel])
                entry[f"{metric}_mean"] = float(vals.mean())
                entry[f"{metric}_std"] = float(vals.std())
            out.append(entry)
        return out

    def row(self, variant: str) -> dict:
        return next(s for s in self.summary() if s["variant"] == variant)

    def to_json(self) -> str:
        return json.dumps(self.rows, indent=1, sort_keys=True)

    def to_text(self) -> str:
        lines = [self.title, f"{'variant':<16}{'MAE':>22}{'RMSE':>22}{'MAPE %':>20}"]
        for s in self.summary():
            lines.append(
                f"{s['variant']:<16}"
                f"{s['mae_mean']:>12.3f} ± {s['mae_std']:<7.3f}"
                f"{s['rmse_mean']:>12.3f} ± {s['rmse_std']:<7.3f}"
                f"{s['mape_mean']:>10.2f} ± {s['mape_std']:<7.2f}"
            )
        return "\n".join(lines)


def _variant_key(name: str):
    order = ("full", "no_multiscale", "no_fusion", "no_scene")
    return (order.index(name), name) if name in order else (len(order), name)


def _run_job(job):
    label, model_config, train_cfg, dataset = job
    result = train(dataset, model_config, train_cfg)
    _, _, test_set = dataset.split()
    report, _ = evaluate_model(result.checkpoint.model(), test_set, train_cfg.percentile)
    return {
        "variant": label,
        "percentile": train_cfg.percentile,
        "seed": train_cfg.seed,
        "mae": report.mae,
        "rmse": report.rmse,
        "mape": report.mape,
    }


def _run_grid(jobs: list, workers: int) -> list[dict]:
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_job, jobs))
    else:
        rows = [_run_job(j) for j in jobs]
    return sorted(rows, key=lambda r: (_variant_key(r["variant"]), r["seed"]))


def _check_seeds(seeds: Sequence[int]) -> list[int]:
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError(f"need at least 3 seeds, got {len(seeds)}")
    return seeds


def run_ablation(
    dataset: WindowDataset,
    variants: Iterable[str] = ("full", "no_multiscale", "no_fusion", "no_scene"),
    seeds: Sequence[int] = (0, 1, 2),
    model_config: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    workers: int = 1,
) -> ResultTable:
    seeds = _check_seeds(seeds)
    train_cfg = train_cfg or TrainConfig()
    variants = list(dict.fromkeys(["full", *variants]))
    base = model_config or ModelConfig(n_nodes=dataset.graph.n)
    jobs = [
        (v, replace(base, variant=v), replace(train_cfg, seed=s), dataset)
        for v in variants for s in seeds
    ]
    table = ResultTable(f"Ablation (P{train_cfg.percentile}, test split, {len(seeds)} seeds)",
                        _run_grid(jobs, workers))
    check_ablation_direction(table)
    return table


def check_ablation_direction(table: ResultTable) -> bool:
    """Soft check that removing the multi-scale branch does not help."""
    names = {r["variant"] for r in table.rows}
    if not {"full", "no_multiscale"} <= names:
        return True
    full, single = table.row("full"), table.row("no_multiscale")
    ok = full["mae_mean"] <= single["mae_mean"]
    if not ok:
        log.warning("ablation: full MAE %.3f ± %.3f exceeds no_multiscale %.3f ± %.3f",
                    full["mae_mean"], full["mae_std"], single["mae_mean"], single["mae_std"])
    return ok


def run_level_sweep(
    dataset: WindowDataset,
    levels: Iterable[int] = (1, 2, 3, 4),
    seeds: Sequence[int] = (0, 1, 2),
    model_config: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    workers: int = 1,
) -> ResultTable:
    seeds = _check_seeds(seeds)
    train_cfg = train_cfg or TrainConfig()
    base = model_config or ModelConfig(n_nodes=dataset.graph.n)
    jobs = [
        (f"levels={lv}", replace(base, levels=lv), replace(train_cfg, seed=s), dataset)
        for lv in levels for s in seeds
    ]
    return ResultTable(f"Hierarchy levels (P{train_cfg.percentile}, test split, {len(seeds)} seeds)",
                       _run_grid(jobs, workers))
