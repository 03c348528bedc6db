"""Window samples loaded from a simkit dataset, stacked for batching."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoding import ServiceGraph, build_feature_matrix, check_schema
from .simkit import (
    PERCENTILE_FACTORS,
    dataset_paths,
    read_records,
    state_from_record,
    topology_from_dict,
)

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


@dataclass
class WindowDataset:
    graph: ServiceGraph
    X: np.ndarray  # (N, n, 9) raw features
    targets: dict[int, np.ndarray]  # percentile -> (N,) ms
    scenarios: list[str]
    window_ids: np.ndarray

    def __len__(self) -> int:
        return self.X.shape[0]

    def subset(self, idx) -> WindowDataset:
        idx = np.asarray(idx)
        return WindowDataset(
            graph=self.graph,
            X=self.X[idx],
            targets={p: t[idx] for p, t in self.targets.items()},
            scenarios=[self.scenarios[i] for i in idx],
            window_ids=self.window_ids[idx],
        )

    def split(self, fractions: Sequence[float] = SPLIT_FRACTIONS) -> tuple[WindowDataset, ...]:
        """Chronological train/val/test split; records must be in time order."""
        order = np.argsort(self.window_ids, kind="stable")
        n = len(order)
        n_train = round(fractions[0] * n)
        n_val = round(fractions[1] * n)
        return (
            self.subset(order[:n_train]),
            self.subset(order[n_train:n_train + n_val]),
            self.subset(order[n_train + n_val:]),
        )

    @property
    def A(self) -> np.ndarray:
        return self.graph.adjacency


def from_records(graph: ServiceGraph, records: Sequence[dict]) -> WindowDataset:
    if not records:
        raise ValueError("dataset has no records")
    X = np.stack([build_feature_matrix(state_from_record(r)) for r in records])
    if X.shape[1] != graph.n:
        raise ValueError(f"records have {X.shape[1]} services, topology has {graph.n}")
    targets = {p: np.array([float(r[f"latency_p{p}"]) for r in records]) for p in PERCENTILE_FACTORS}
    return WindowDataset(
        graph=graph,
        X=X,
        targets=targets,
        scenarios=[r.get("scenario_kind", "") for r in records],
        window_ids=np.array([int(r["window_id"]) for r in records]),
    )


def load_dataset(path: str | Path) -> WindowDataset:
    """Read a JSON-lines dataset and the topology sidecar written next to it."""
    data_path, topo_path = dataset_paths(path)
    topo = json.loads(topo_path.read_text(encoding="utf-8"))
    schema = topo.get("schema")
    if schema is not None:
        check_schema(schema["metrics"], schema["version"])
    return from_records(topology_from_dict(topo), read_records(data_path))
