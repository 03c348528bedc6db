"""Synthetic microservice systems with a queueing ground-truth latency.

A dataset is a topology sidecar (JSON) plus one JSON line per monitoring
window. Per-window latencies come from an M/M/c model per service, combined
along the slowest root-to-leaf call path of the service DAG.
"""

from __future__ import annotations

import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoding import METRIC_COLUMNS, SCHEMA_VERSION, ServiceGraph, SystemState

TEMPLATES = ("boutique11", "sockshop13", "random")
SCENARIOS = ("cpu", "io", "network", "mixed")
PERCENTILE_FACTORS = {50: 1.0, 90: 2.3, 99: 4.6}
MAX_UTILIZATION = 0.99

_BOUTIQUE = (
    ("frontend", "cartservice", "productcatalogservice", "currencyservice",
     "recommendationservice", "shippingservice", "checkoutservice", "adservice",
     "emailservice", "paymentservice", "redis-cart"),
    ((0, 1), (0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (0, 7),
     (6, 1), (6, 2), (6, 3), (6, 5), (6, 8), (6, 9),
     (4, 2), (1, 10)),
)
_SOCKSHOP = (
    ("front-end", "catalogue", "carts", "orders", "user", "catalogue-db", "carts-db",
     "orders-db", "payment", "shipping", "user-db", "rabbitmq", "queue-master"),
    ((0, 1), (0, 2), (0, 3), (0, 4),
     (1, 5), (2, 6), (3, 7), (3, 8), (3, 9), (3, 4), (3, 2),
     (4, 10), (9, 11), (11, 12)),
)


@dataclass(frozen=True)
class ScenarioSpec:
    """Multipliers on the cpu, io and network parts of each service's demand."""

    kind: str
    cpu: float = 1.0
    io: float = 1.0
    network: float = 1.0
    noise: float = 0.05

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}")
        if min(self.cpu, self.io, self.network) < 1.0:
            raise ValueError("scenario multipliers must be >= 1")


DEFAULT_SCENARIOS: dict[str, ScenarioSpec] = {
    "cpu": ScenarioSpec("cpu", cpu=2.2),
    "io": ScenarioSpec("io", io=3.0),
    "network": ScenarioSpec("network", network=3.0),
    "mixed": ScenarioSpec("mixed", cpu=1.4, io=1.4, network=1.4),
}


def generate_topology(template: str, seed: int = 0, n: int = 8) -> ServiceGraph:
    """Named benchmark shape, or a random connected DAG with out-degree <= 4."""
    if template == "boutique11":
        names, edges = _BOUTIQUE
        return ServiceGraph.from_edges(len(names), edges, names=names, entries=(0,))
    if template == "sockshop13":
        names, edges = _SOCKSHOP
        return ServiceGraph.from_edges(len(names), edges, names=names, entries=(0,))
    if template != "random":
        raise ValueError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    if n < 1:
        raise ValueError("random topology needs n >= 1")
    rng = np.random.default_rng(seed)
    out_deg = np.zeros(n, dtype=int)
    edges = set()
    for j in range(1, n):
        parents = [i for i in range(j) if out_deg[i] < 4]
        i = int(rng.choice(parents))
        edges.add((i, j))
        out_deg[i] += 1
    for _ in range(n // 2):
        i, j = sorted(int(v) for v in rng.choice(n, size=2, replace=False)) if n > 1 else (0, 0)
        if i != j and (i, j) not in edges and out_deg[i] < 4:
            edges.add((i, j))
            out_deg[i] += 1
    names = tuple(f"svc{i}" for i in range(n))
    return ServiceGraph.from_edges(n, sorted(edges), names=names, entries=(0,))


def topology_to_dict(g: ServiceGraph, name: str) -> dict:
    return {
        "name": name,
        "n": g.n,
        "names": list(g.names),
        "edges": [list(e) for e in g.edges()],
        "entries": list(g.entries),
    }


def topology_from_dict(d: Mapping) -> ServiceGraph:
    names = d.get("names") or [f"svc{i}" for i in range(d["n"])]
    return ServiceGraph.from_edges(d["n"], [tuple(e) for e in d["edges"]], names=names,
                                   entries=d.get("entries", [0]))


def path_counts(g: ServiceGraph) -> np.ndarray:
    """Number of distinct call paths from any entry service to each service."""
    adj = g.adjacency
    counts = np.zeros(g.n)
    for e in g.entries:
        counts[e] += 1.0
    for node in topological_order(g):
        for child in np.nonzero(adj[node])[0]:
            counts[child] += counts[node]
    return counts


def topological_order(g: ServiceGraph) -> list[int]:
    adj = g.adjacency
    indeg = (adj > 0).sum(axis=0).astype(int)
    ready = [i for i in range(g.n) if indeg[i] == 0]
    order = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for child in np.nonzero(adj[node])[0]:
            indeg[child] -= 1
            if indeg[child] == 0:
                ready.append(int(child))
    if len(order) != g.n:
        raise ValueError("call graph has a cycle")
    return order


# -- traces -----------------------------------------------------------------


@dataclass(frozen=True)
class TraceProfile:
    shape: str
    base_rps: float
    rates: np.ndarray = field(repr=False)

    @property
    def windows(self) -> int:
        return len(self.rates)


def _rescale_log_spread(rates: np.ndarray, lo: float | None, hi: float | None) -> np.ndarray:
    log_r = np.log(rates)
    spread = log_r.max() - log_r.min()
    center = np.log(np.median(rates))
    if lo is not None and spread < math.log(lo):
        log_r = center + (log_r - center) * (math.log(lo) / max(spread, 1e-12)) * 1.001
    if hi is not None and spread > math.log(hi):
        log_r = center + (log_r - center) * (math.log(hi) / spread) * 0.999
    return np.exp(log_r)


def generate_trace(shape: str, n_windows: int, seed: int, base_rps: float = 40.0) -> TraceProfile:
    """Request-rate series: ``smooth`` (max/min <= 1.5) or ``bursty`` (>= 5)."""
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    rng = np.random.default_rng(seed)
    t = np.arange(n_windows)
    if shape == "smooth":
        phase = rng.uniform(0, 2 * np.pi)
        rates = 1.0 + 0.15 * np.sin(2 * np.pi * t / 288 + phase) + rng.normal(0, 0.02, n_windows)
        rates = base_rps * np.clip(rates, 0.8, 1.2)
        if n_windows > 1:
            rates = _rescale_log_spread(rates, None, 1.5)
    elif shape == "bursty":
        drift = np.zeros(n_windows)
        for i in range(1, n_windows):
            drift[i] = 0.9 * drift[i - 1] + rng.normal(0, 0.15)
        bursts = np.where(rng.random(n_windows) < 0.05, rng.uniform(1.0, 1.8, n_windows), 0.0)
        rates = base_rps * np.exp(drift + bursts - 0.3)
        if n_windows > 1:
            rates = _rescale_log_spread(rates, 5.0, None)
    else:
        raise ValueError(f"unknown trace shape {shape!r}; expected smooth or bursty")
    return TraceProfile(shape=shape, base_rps=base_rps, rates=rates)


# -- queueing oracle -----------------------------------------------------------


def erlang_c(c: int, offered: float) -> float:
    """Probability an arrival waits in M/M/c with offered load ``lambda/mu`` < c."""
    term, total = 1.0, 1.0
    for i in range(1, c):
        term *= offered / i
        total += term
    last = term * offered / c
    rho = offered / c
    tail = last / (1.0 - rho)
    return tail / (total + tail)


def mmc_sojourn(lam: float, mu: float, c: int) -> tuple[float, bool]:
    """Mean time in system of M/M/c, with utilization clipped to 0.99.

    Returns ``(sojourn, saturated)``; rates in 1/s, time in s.
    """
    rho = lam / (c * mu)
    saturated = rho >= 1.0
    rho = min(rho, MAX_UTILIZATION)
    offered = rho * c
    if offered <= 0.0:
        return 1.0 / mu, saturated
    wait = erlang_c(c, offered) / (c * mu - offered * mu)
    return wait + 1.0 / mu, saturated


@dataclass(frozen=True)
class OracleModel:
    """Per-service demand components in core-milliseconds per request."""

    cpu_ms: np.ndarray
    io_ms: np.ndarray
    net_ms: np.ndarray

    def demand_ms(self, scenario: ScenarioSpec | None = None) -> np.ndarray:
        if scenario is None:
            return self.cpu_ms + self.io_ms + self.net_ms
        s = scenario
        return self.cpu_ms * s.cpu + self.io_ms * s.io + self.net_ms * s.network

    @classmethod
    def sample(cls, n: int, rng: np.random.Generator) -> OracleModel:
        return cls(
            cpu_ms=rng.uniform(4.0, 10.0, n),
            io_ms=rng.uniform(0.5, 4.0, n),
            net_ms=rng.uniform(0.5, 3.0, n),
        )

    @classmethod
    def uniform(cls, n: int, demand_ms: float) -> OracleModel:
        return cls(cpu_ms=np.full(n, float(demand_ms)), io_ms=np.zeros(n), net_ms=np.zeros(n))


@dataclass(frozen=True)
class OracleResult:
    latency_ms: float
    sojourn_ms: np.ndarray
    arrival_rps: np.ndarray
    saturated: tuple[int, ...]


def arrival_rates(g: ServiceGraph, state: SystemState) -> np.ndarray:
    """Per-service arrival rate (req/s): entry rate times incoming call paths."""
    entry_rps = state.W[list(g.entries), 0].sum() / 60.0
    return entry_rps * path_counts(g)


def oracle_details(
    g: ServiceGraph,
    state: SystemState,
    percentile: int,
    model: OracleModel,
    scenario: ScenarioSpec | None = None,
) -> OracleResult:
    if percentile not in PERCENTILE_FACTORS:
        raise ValueError(f"percentile must be one of {sorted(PERCENTILE_FACTORS)}")
    factor = PERCENTILE_FACTORS[percentile]
    lam = arrival_rates(g, state)
    demand = model.demand_ms(scenario)
    pods = np.maximum(1, np.rint(state.S[:, METRIC_COLUMNS.index("pod_count")])).astype(int)
    quota = state.C[:, 0]
    if np.any(quota <= 0):
        raise ValueError("quotas must be positive")
    sojourn = np.zeros(g.n)
    saturated = []
    for i in range(g.n):
        mu = (quota[i] / pods[i]) * 1000.0 / demand[i]
        t, sat = mmc_sojourn(lam[i], mu, int(pods[i]))
        sojourn[i] = t * 1000.0 * factor
        if sat:
            saturated.append(i)
    return OracleResult(
        latency_ms=longest_path(g, sojourn),
        sojourn_ms=sojourn,
        arrival_rps=lam,
        saturated=tuple(saturated),
    )


def oracle_latency(g, state, percentile, model, scenario=None) -> float:
    """End-to-end latency (ms) at ``percentile`` for one window."""
    return oracle_details(g, state, percentile, model, scenario).latency_ms


def longest_path(g: ServiceGraph, node_cost: np.ndarray) -> float:
    """Max over entry-to-leaf paths of the summed node costs."""
    order = topological_order(g)
    best = np.full(g.n, -np.inf)
    for e in g.entries:
        best[e] = node_cost[e]
    for node in order:
        if not np.isfinite(best[node]):
            continue
        for child in np.nonzero(g.adjacency[node])[0]:
            best[child] = max(best[child], best[node] + node_cost[child])
    return float(best[np.isfinite(best)].max())


# -- datasets ----------------------------------------------------------------


@dataclass(frozen=True)
class SystemProfile:
    """Static per-service properties of one synthetic deployment."""

    oracle: OracleModel
    base_pods: np.ndarray
    mem_base: np.ndarray
    kb_in: np.ndarray
    kb_out: np.ndarray

    @classmethod
    def sample(cls, n: int, rng: np.random.Generator) -> SystemProfile:
        return cls(
            oracle=OracleModel.sample(n, rng),
            base_pods=rng.integers(1, 4, n),
            mem_base=rng.uniform(0.15, 0.45, n),
            kb_in=rng.uniform(1.0, 8.0, n),
            kb_out=rng.uniform(2.0, 16.0, n),
        )


def synthesize_window(
    g: ServiceGraph,
    profile: SystemProfile,
    scenario: ScenarioSpec,
    entry_rps: float,
    rng: np.random.Generator,
) -> SystemState:
    """Metrics, quotas and workload for one window.

    Quotas follow a scenario-blind autoscaler: base demand times a random
    headroom, so the active scenario pushes utilization up or down.
    """
    n = g.n
    lam = entry_rps * path_counts(g)
    o = profile.oracle
    base_demand = o.demand_ms()
    headroom = rng.uniform(2.2, 3.6, n)
    quota = np.maximum(lam * base_demand / 1000.0 * headroom, 0.05)
    quota = np.round(quota, 3)
    pods = profile.base_pods + (rng.random(n) < 0.2)

    cpu_busy = lam * o.cpu_ms * scenario.cpu / 1000.0
    io_busy = lam * o.io_ms * scenario.io / 1000.0
    rho = lam * o.demand_ms(scenario) / 1000.0 / quota
    jitter = lambda scale: rng.normal(1.0, scale, n)

    cpu_util = np.clip(cpu_busy / quota * jitter(0.03), 0.0, 1.0)
    mem_util = np.clip(profile.mem_base + 0.2 * np.minimum(rho, 1.0)
                       + (0.1 if scenario.kind == "io" else 0.0) + rng.normal(0, 0.02, n), 0.0, 1.0)
    file_io = np.maximum(io_busy * 40.0 * jitter(0.05), 0.0)
    child_lam = g.adjacency @ lam
    net_in = np.maximum(lam * profile.kb_in * scenario.network * jitter(0.05), 0.0)
    net_out = np.maximum((lam * profile.kb_out + child_lam * profile.kb_in) * scenario.network
                         * jitter(0.05), 0.0)
    calls = np.maximum(lam * 60.0 * jitter(0.02), 0.0)
    S = np.column_stack([cpu_util, mem_util, file_io, net_in, net_out, pods.astype(float), calls])
    W = np.zeros(n)
    W[list(g.entries)] = entry_rps * 60.0
    return SystemState(S=S, C=quota.reshape(-1, 1), W=W.reshape(-1, 1))


def _round(a: np.ndarray, digits: int = 6) -> list:
    return np.round(np.asarray(a, dtype=np.float64), digits).tolist()


def generate_records(
    template: str,
    scenario_mix: Mapping[str, float] | None = None,
    trace: str = "bursty",
    n_windows: int = 2000,
    seed: int = 0,
    oracle: str = "queueing",
    scenarios: Mapping[str, ScenarioSpec] = DEFAULT_SCENARIOS,
    n_random: int = 8,
) -> tuple[ServiceGraph, list[dict]]:
    """Topology plus one record per window, in window (time) order.

    ``oracle="linear"`` replaces the queueing targets by an affine function of
    the quotas, a realizable target used for learnability checks.
    """
    if n_windows < 1:
        raise ValueError("n_windows must be >= 1")
    mix = dict(scenario_mix or {k: 0.25 for k in SCENARIOS})
    unknown = set(mix) - set(SCENARIOS)
    if unknown:
        raise ValueError(f"unknown scenario kinds {sorted(unknown)}")
    kinds = sorted(mix)
    probs = np.array([mix[k] for k in kinds], dtype=float)
    probs = probs / probs.sum()

    g = generate_topology(template, seed=seed, n=n_random)
    rng = np.random.default_rng(seed)
    profile = SystemProfile.sample(g.n, rng)
    rates = generate_trace(trace, n_windows, seed=seed + 1).rates
    linear_w = rng.uniform(5.0, 20.0, g.n)

    records = []
    for w in range(n_windows):
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        scenario = scenarios[kind]
        state = synthesize_window(g, profile, scenario, float(rates[w]), rng)
        # Round first so the stored state reproduces the stored targets.
        state = SystemState(S=np.round(state.S, 6), C=state.C, W=np.round(state.W, 6))
        rec = {
            "window_id": w,
            "scenario_kind": kind,
            "graph_ref": template,
            "S": _round(state.S),
            "C": _round(state.C[:, 0]),
            "W": _round(state.W[:, 0]),
        }
        if oracle == "linear":
            base = 20.0 + float(linear_w @ state.C[:, 0])
            for p, factor in PERCENTILE_FACTORS.items():
                rec[f"latency_p{p}"] = round(base * factor, 6)
            saturated: tuple[int, ...] = ()
        elif oracle == "queueing":
            noise = np.exp(rng.normal(0.0, scenario.noise))
            saturated = ()
            for p in PERCENTILE_FACTORS:
                res = oracle_details(g, state, p, profile.oracle, scenario)
                rec[f"latency_p{p}"] = round(res.latency_ms * noise, 6)
                saturated = res.saturated
        else:
            raise ValueError(f"unknown oracle {oracle!r}")
        rec["meta"] = {"entry_rps": round(float(rates[w]), 6), "saturated": list(saturated)}
        records.append(rec)
    return g, records


def dataset_paths(out: str | Path) -> tuple[Path, Path]:
    out = Path(out)
    return out, out.with_name(out.stem + ".topology.json")


def generate_dataset(
    template: str,
    scenario_mix: Mapping[str, float] | None,
    trace: str,
    n_windows: int,
    seed: int,
    out: str | Path,
    **kwargs,
) -> tuple[Path, Path]:
    """Write the JSON-lines dataset and its topology sidecar; returns both paths."""
    g, records = generate_records(template, scenario_mix, trace, n_windows, seed, **kwargs)
    data_path, topo_path = dataset_paths(out)
    try:
        data_path.parent.mkdir(parents=True, exist_ok=True)
        with open(data_path, "w", encoding="utf-8") as fh:
            fh.writelines(json.dumps(rec, sort_keys=True) + "\n" for rec in records)
        topo = topology_to_dict(g, template)
        topo["schema"] = {"version": SCHEMA_VERSION, "metrics": list(METRIC_COLUMNS)}
        topo_path.write_text(json.dumps(topo, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing dataset to {data_path}: {exc}") from exc
    return data_path, topo_path


def state_from_record(rec: Mapping) -> SystemState:
    for key in ("S", "C", "W"):
        if key not in rec:
            raise KeyError(f"record is missing field {key!r}")
    return SystemState(S=np.asarray(rec["S"], dtype=float),
                       C=np.asarray(rec["C"], dtype=float).reshape(-1, 1),
                       W=np.asarray(rec["W"], dtype=float).reshape(-1, 1))


def read_records(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_topology(path: str | Path) -> ServiceGraph:
    return topology_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def scenario_counts(records: Sequence[Mapping]) -> dict[str, int]:
    counts = {k: 0 for k in SCENARIOS}
    for rec in records:
        counts[rec["scenario_kind"]] += 1
    return counts
