"""Service graphs, per-window system state, and the unified feature matrix."""

from __future__ import annotations

from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1
METRIC_COLUMNS: tuple[str, ...] = (
    "cpu_util",
    "mem_util",
    "file_io",
    "net_in",
    "net_out",
    "pod_count",
    "calls_per_min",
)
FEATURE_COLUMNS: tuple[str, ...] = METRIC_COLUMNS + ("quota", "workload")
N_METRICS = len(METRIC_COLUMNS)
N_FEATURES = len(FEATURE_COLUMNS)
STD_FLOOR = 1e-8


class GraphError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def check_schema(columns: Sequence[str], version: int = SCHEMA_VERSION) -> None:
    if version != SCHEMA_VERSION:
        raise SchemaError(f"metric schema version {version} != {SCHEMA_VERSION}")
    if tuple(columns) != METRIC_COLUMNS:
        raise SchemaError(f"metric columns {list(columns)} do not match {list(METRIC_COLUMNS)}")


@dataclass(frozen=True)
class ServiceGraph:
    names: tuple[str, ...]
    adjacency: np.ndarray
    entries: tuple[int, ...] = (0,)

    def __post_init__(self):
        adj = np.array(self.adjacency, dtype=np.float64)
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "entries", tuple(int(e) for e in self.entries))
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] < 1:
            raise GraphError(f"adjacency must be square n x n with n >= 1, got {adj.shape}")
        if len(self.names) != adj.shape[0]:
            raise GraphError(f"{len(self.names)} names for {adj.shape[0]} services")

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def from_edges(cls, n: int, edges, names=None, entries=(0,)) -> ServiceGraph:
        adj = np.zeros((n, n))
        for i, j in edges:
            adj[i, j] = 1.0
        if names is None:
            names = tuple(f"svc{i}" for i in range(n))
        return cls(names=tuple(names), adjacency=adj, entries=tuple(entries))

    def edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adjacency))]


@dataclass(frozen=True)
class GraphReport:
    n: int
    n_edges: int
    connected: bool
    isolated: tuple[int, ...] = field(default_factory=tuple)


def validate_graph(g: ServiceGraph) -> GraphReport:
    """Check binary entries and empty diagonal, then report weak connectivity."""
    adj = g.adjacency
    bad = np.argwhere((adj != 0.0) & (adj != 1.0))
    if bad.size:
        i, j = bad[0]
        raise GraphError(f"non-binary adjacency entry {adj[i, j]!r} at ({i}, {j})")
    loops = np.nonzero(np.diag(adj))[0]
    if loops.size:
        raise GraphError(f"self-loop at node {int(loops[0])}")

    undirected = (adj + adj.T) > 0
    seen = {0}
    queue = deque([0])
    while queue:
        i = queue.popleft()
        for j in np.nonzero(undirected[i])[0]:
            if int(j) not in seen:
                seen.add(int(j))
                queue.append(int(j))
    isolated = tuple(int(i) for i in range(g.n) if not undirected[i].any()) if g.n > 1 else ()
    return GraphReport(
        n=g.n,
        n_edges=int(adj.sum()),
        connected=len(seen) == g.n,
        isolated=isolated,
    )


@dataclass(frozen=True)
class SystemState:
    """Metrics ``S`` (n x 7), quotas ``C`` (n x 1, cores), workload ``W`` (n x 1, req/min)."""

    S: np.ndarray
    C: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        for key in ("S", "C", "W"):
            arr = np.array(getattr(self, key), dtype=np.float64)
            if arr.ndim == 1:
                arr = arr.reshape(-1, 1) if key != "S" else arr.reshape(1, -1)
            arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        if self.S.shape[1] != N_METRICS:
            raise SchemaError(f"S must have {N_METRICS} metric columns, got {self.S.shape[1]}")
        for key in ("S", "C", "W"):
            arr = getattr(self, key)
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{key} must be finite and non-negative")

    @property
    def n(self) -> int:
        return self.S.shape[0]


def build_feature_matrix(state: SystemState) -> np.ndarray:
    """``X = [S, C, W]`` with shape n x 9."""
    n = state.S.shape[0]
    for key in ("C", "W"):
        arr = getattr(state, key)
        if arr.shape != (n, 1):
            raise ValueError(f"{key} has shape {arr.shape}, expected ({n}, 1) to match S")
    return np.concatenate([state.S, state.C, state.W], axis=1)


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


def fit_normalizer(train_X: Sequence[np.ndarray]) -> Normalizer:
    """Population z-score statistics pooled over every row of every matrix."""
    if len(train_X) < 2:
        raise ValueError(f"need at least 2 training matrices, got {len(train_X)}")
    rows = np.concatenate([np.asarray(x, dtype=np.float64) for x in train_X], axis=0)
    return Normalizer(mean=rows.mean(axis=0), std=np.maximum(rows.std(axis=0), STD_FLOOR))
