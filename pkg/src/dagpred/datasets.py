"""JSONL dataset format, deterministic splits and a synthetic latency benchmark.

Synthetic targets are ``C_crit + beta * (C_total - C_crit)`` where ``C_total``
is the summed node cost and ``C_crit`` the costliest source-to-sink path:
parallel branches are cheaper than serial chains, so the target depends on
topology and not only on the multiset of operations.
"""

from __future__ import annotations

import gzip
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dag import Dag, NodeDescriptor
from .errors import DagpredError, EmptyInput, ParseError, ValidationError


@dataclass(frozen=True)
class DagRecord:
    nodes: tuple[NodeDescriptor, ...]
    edges: tuple[tuple[int, int], ...]
    target: float

    def to_dag(self) -> Dag:
        return Dag.from_edges(len(self.nodes), self.edges, self.nodes)

    def to_json(self) -> dict:
        return {
            "nodes": [{"op": nd.op_type, "attrs": list(nd.attrs), "shape": list(nd.shape)}
                      for nd in self.nodes],
            "edges": [list(e) for e in self.edges],
            "target": self.target,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "DagRecord":
        if set(obj) != {"nodes", "edges", "target"}:
            raise ValueError(f"expected keys nodes/edges/target, got {sorted(obj)}")
        nodes = tuple(NodeDescriptor(int(nd["op"]), tuple(nd.get("attrs", ())),
                                     tuple(nd.get("shape", ()))) for nd in obj["nodes"])
        edges = []
        seen = set()
        for e in obj["edges"]:
            src, dst = int(e[0]), int(e[1])
            if (src, dst) not in seen:
                seen.add((src, dst))
                edges.append((src, dst))
        target = float(obj["target"])
        if not math.isfinite(target):
            raise ValueError("target must be finite")
        rec = cls(nodes, tuple(edges), target)
        rec.to_dag()
        return rec

    @classmethod
    def from_dag(cls, dag: Dag, target: float) -> "DagRecord":
        return cls(dag.nodes, tuple(dag.edges), float(target))


def _open(path, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def save_jsonl(records: Iterable[DagRecord], path) -> None:
    with _open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def load_jsonl(path) -> list[DagRecord]:
    """One record per non-blank line; ``.gz`` files are decompressed."""
    out = []
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, str(exc)) from None
            try:
                out.append(DagRecord.from_json(obj))
            except (DagpredError, ValueError, KeyError, TypeError, IndexError) as exc:
                raise ValidationError(len(out), str(exc)) from None
    return out


DEFAULT_OP_COSTS = {0: 1.0, 1: 2.0, 2: 0.5, 3: 3.0, 4: 1.5, 5: 0.25, 6: 4.0, 7: 1.0}


@dataclass(frozen=True)
class SynthConfig:
    n_graphs: int = 1000
    depth_min: int = 3
    depth_max: int = 12
    width_min: int = 1
    width_max: int = 4
    extra_edge_prob: float = 0.1
    op_costs: Mapping[int, float] = field(default_factory=lambda: dict(DEFAULT_OP_COSTS))
    parallel_discount: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_graphs < 0:
            raise ValueError("n_graphs must be non-negative")
        if not 1 <= self.depth_min <= self.depth_max:
            raise ValueError("need 1 <= depth_min <= depth_max")
        if not 1 <= self.width_min <= self.width_max:
            raise ValueError("need 1 <= width_min <= width_max")
        if not 0.0 <= self.extra_edge_prob <= 0.5:
            raise ValueError("extra_edge_prob must lie in [0, 0.5]")
        if not self.op_costs or any(c <= 0 for c in self.op_costs.values()):
            raise ValueError("op_costs must be non-empty and positive")
        if any(not 0 <= int(k) < 32 for k in self.op_costs):
            raise ValueError("op ids must lie in [0, 32)")
        if self.depth_max * self.width_max > 4096:
            raise ValueError("graphs would exceed 4096 nodes")


def critical_path_cost(dag: Dag, costs: Sequence[float]) -> float:
    """Largest total node cost along any path, by dynamic programming in topological order."""
    best = np.array(costs, dtype=np.float64)
    for u in dag.topological_order():
        for v in np.flatnonzero(dag.adj[u]):
            best[v] = max(best[v], best[u] + costs[v])
    return float(best.max())


def synthetic_target(dag: Dag, op_costs: Mapping[int, float], beta: float) -> float:
    costs = [float(op_costs[nd.op_type]) for nd in dag.nodes]
    crit = critical_path_cost(dag, costs)
    return crit + beta * (sum(costs) - crit)


def _layered_graph(rng: np.random.Generator, cfg: SynthConfig, ops: np.ndarray):
    depth = int(rng.integers(cfg.depth_min, cfg.depth_max + 1))
    widths = rng.integers(cfg.width_min, cfg.width_max + 1, size=depth)
    layers = []
    start = 0
    for w in widths:
        layers.append(list(range(start, start + int(w))))
        start += int(w)
    n = start
    edges = set()
    for j in range(1, depth):
        prev = layers[j - 1]
        for v in layers[j]:
            chosen = [u for u in prev if rng.random() < 0.5]
            if not chosen:
                chosen = [prev[int(rng.integers(len(prev)))]]
            edges.update((u, v) for u in chosen)
            if j >= 2 and rng.random() < cfg.extra_edge_prob:
                far = [u for layer in layers[:j - 1] for u in layer]
                edges.add((far[int(rng.integers(len(far)))], v))
    op_types = rng.choice(ops, size=n)
    nodes = tuple(NodeDescriptor(int(o)) for o in op_types)
    return Dag.from_edges(n, sorted(edges), nodes)


def generate_synthetic(cfg: SynthConfig) -> list[DagRecord]:
    """Layered random DAGs with critical-path latency targets; deterministic in ``cfg.seed``.

    Each graph draws its own generator from ``(seed, "data" stream, index)``.
    """
    ops = np.array(sorted(int(k) for k in cfg.op_costs))
    costs = {int(k): float(v) for k, v in cfg.op_costs.items()}
    out = []
    for i in range(cfg.n_graphs):
        rng = np.random.default_rng([cfg.seed, 3, i])
        dag = _layered_graph(rng, cfg, ops)
        out.append(DagRecord.from_dag(dag, synthetic_target(dag, costs, cfg.parallel_discount)))
    return out


def split(records: Sequence, fractions: Sequence[float], seed: int = 0):
    """Seeded shuffle followed by contiguous slices; returns one list per fraction."""
    if not len(records):
        raise EmptyInput("cannot split an empty dataset")
    fractions = list(fractions)
    if any(f < 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise ValueError(f"fractions must be non-negative and sum to <= 1, got {fractions}")
    n = len(records)
    order = np.random.default_rng([seed, 4]).permutation(n)
    out, start = [], 0
    for f in fractions:
        size = min(int(round(f * n)), n - start)
        out.append([records[i] for i in order[start:start + size]])
        start += size
    return tuple(out)
