"""Command-line entry point: generate, train, evaluate, predict, ablate, sweep.

Every command takes an optional ``--config`` JSON file; flags override it. The
effective configuration is written to the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import load_dataset
from .encoding import SchemaError, build_feature_matrix
from .evalkit import evaluate_model, predict_window, run_ablation, run_level_sweep
from .model import VARIANTS, ModelConfig
from .simkit import (
    SCENARIOS,
    dataset_paths,
    generate_dataset,
    load_topology,
    read_records,
    scenario_counts,
    state_from_record,
)
from .training import (
    CheckpointError,
    LossConfig,
    TrainConfig,
    TrainingError,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # data
    template: str = "boutique11"
    windows: int = 2000
    trace: str = "bursty"
    oracle: str = "queueing"
    scenario_mix: dict = field(default_factory=lambda: {k: 0.25 for k in SCENARIOS})
    dataset: str | None = None
    output_dir: str = "run"
    checkpoint: str | None = None
    # model
    hidden: int = 64
    out_dim: int = 64
    scene_dim: int = 32
    scene_hidden: int = 64
    expert_hidden: int = 64
    n_experts: int = 4
    levels: int = 3
    variant: str = "full"
    # training
    lambda_kl: float = 0.01
    kl_epsilon: float = 1e-8
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 500
    patience: int = 20
    seed: int = 0
    percentile: int = 90
    # sweeps
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    workers: int = 1
    split: str = "test"

    def validate(self) -> RunConfig:
        if self.percentile not in (50, 90, 99):
            raise ConfigError(f"percentile must be 50, 90 or 99, got {self.percentile}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.split not in ("train", "val", "test"):
            raise ConfigError(f"split must be train, val or test, got {self.split!r}")
        if self.windows < 1 or self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("windows and epochs must be >= 1, batch_size >= 2")
        return self

    @property
    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else Path(self.output_dir) / "dataset.jsonl"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.output_dir) / "model.ckpt"

    def model_config(self, n_nodes: int) -> ModelConfig:
        return ModelConfig(
            n_nodes=n_nodes, hidden=self.hidden, out_dim=self.out_dim,
            scene_hidden=self.scene_hidden, scene_dim=self.scene_dim,
            expert_hidden=self.expert_hidden, n_experts=self.n_experts,
            levels=self.levels, variant=self.variant,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, max_epochs=self.epochs, patience=self.patience, seed=self.seed,
            percentile=self.percentile,
            loss=LossConfig(lambda_kl=self.lambda_kl, kl_epsilon=self.kl_epsilon,
                            batch_size=self.batch_size),
        )


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig(**data).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _echo_config(cfg: RunConfig, name: str = "config.json") -> None:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _split(cfg: RunConfig, dataset):
    return dict(zip(("train", "val", "test"), dataset.split()))[cfg.split]


def cmd_generate(cfg: RunConfig) -> int:
    data_path, topo_path = generate_dataset(
        cfg.template, cfg.scenario_mix, cfg.trace, cfg.windows, cfg.seed, cfg.dataset_path,
        oracle=cfg.oracle,
    )
    _echo_config(cfg)
    counts = scenario_counts(read_records(data_path))
    print(f"wrote {cfg.windows} windows to {data_path} (topology {topo_path.name})")
    print("scenario mix: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    dataset = load_dataset(cfg.dataset_path)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log_fh:
        result = train(dataset, cfg.model_config(dataset.graph.n), cfg.train_config(), log_file=log_fh)
    save_checkpoint(result.checkpoint, cfg.checkpoint_path)
    _, val_set, test_set = dataset.split()
    model = result.checkpoint.model()
    report = {
        "val": evaluate_model(model, val_set, cfg.percentile)[0].as_dict(),
        "test": evaluate_model(model, test_set, cfg.percentile)[0].as_dict(),
        "best_epoch": result.checkpoint.meta["epoch"],
        "epochs_run": len(result.history),
    }
    _write_json(out / "train_report.json", report)
    print(f"checkpoint: {cfg.checkpoint_path}")
    for split in ("val", "test"):
        m = report[split]
        print(f"{split}: MAE {m['mae']:.3f} ms  RMSE {m['rmse']:.3f} ms  MAPE {m['mape']:.2f}%  (n={m['n_samples']})")
    return EXIT_OK


def _load_model(cfg: RunConfig, n_nodes: int):
    expected = cfg.model_config(n_nodes).digest()
    return load_checkpoint(cfg.checkpoint_path, expected_hash=expected).model()


def cmd_evaluate(cfg: RunConfig) -> int:
    dataset = load_dataset(cfg.dataset_path)
    model = _load_model(cfg, dataset.graph.n)
    report, rows = evaluate_model(model, _split(cfg, dataset), cfg.percentile)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", report.as_dict())
    with open(out / "samples.jsonl", "w", encoding="utf-8") as fh:
        fh.writelines(json.dumps(row) + "\n" for row in rows)
    print(f"{cfg.split}: MAE {report.mae:.3f} ms  RMSE {report.rmse:.3f} ms  "
          f"MAPE {report.mape:.2f}%  (n={report.n_samples})")
    return EXIT_OK


def cmd_predict(cfg: RunConfig, record_src: str) -> int:
    text = sys.stdin.read() if record_src == "-" else Path(record_src).read_text(encoding="utf-8")
    try:
        record = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed record JSON: {exc}") from exc
    if not isinstance(record, dict):
        raise ConfigError("record must be a JSON object")
    _, topo_path = dataset_paths(cfg.dataset_path)
    graph = load_topology(topo_path)
    try:
        X = build_feature_matrix(state_from_record(record))
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"record does not match the window schema: {exc}") from exc
    if X.shape[0] != graph.n:
        raise SchemaError(f"record field 'S' has {X.shape[0]} services, topology has {graph.n}")
    model = _load_model(cfg, graph.n)
    out = predict_window(model, X, graph.adjacency)
    print(json.dumps({"L_hat_ms": out["L_hat"], "omega": out["omega"], "beta": out["beta"],
                      "expert_outputs": out["expert_outputs"]}))
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    dataset = load_dataset(cfg.dataset_path)
    table = run_ablation(dataset, seeds=cfg.seeds, model_config=cfg.model_config(dataset.graph.n),
                         train_cfg=cfg.train_config(), workers=cfg.workers)
    _echo_config(cfg)
    (Path(cfg.output_dir) / "ablation.json").write_text(table.to_json() + "\n", encoding="utf-8")
    print(table.to_text())
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    dataset = load_dataset(cfg.dataset_path)
    table = run_level_sweep(dataset, seeds=cfg.seeds, model_config=cfg.model_config(dataset.graph.n),
                            train_cfg=cfg.train_config(), workers=cfg.workers)
    _echo_config(cfg)
    (Path(cfg.output_dir) / "sweep.json").write_text(table.to_json() + "\n", encoding="utf-8")
    print(table.to_text())
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    defaults = RunConfig()
    for f in fields(RunConfig):
        if f.name in ("scenario_mix",):
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name == "seeds":
            common.add_argument(flag, type=int, nargs="+", dest=f.name)
            continue
        value = getattr(defaults, f.name)
        kind = type(value) if value is not None else str
        common.add_argument(flag, type=kind, dest=f.name)
    common.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="msgaf", description="Multi-scale graph latency estimator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("generate", "train", "evaluate", "ablate", "sweep"):
        sub.add_parser(name, parents=[common])
    p = sub.add_parser("predict", parents=[common])
    p.add_argument("--record", required=True, help="window record JSON file, or - for stdin")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "predict":
            return cmd_predict(cfg, args.record)
        return COMMANDS[args.command](cfg)
    except (ConfigError, SchemaError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
