"""Directed acyclic graphs, attention-mask algebra and directed WL refinement.

Edge convention: ``adj[i, j]`` is true iff there is an edge ``i -> j``.
Under this convention ``A @ A.T`` marks pairs with a common child and
``A.T @ A`` marks pairs with a common parent.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CycleDetected,
    DescriptorError,
    SelfLoop,
    ShapeMismatch,
    UnknownVariant,
)

MAX_NODES = 4096
NUM_OP_TYPES = 32
MAX_ATTRS = 8
MAX_SHAPE = 4


@dataclass(frozen=True)
class NodeDescriptor:
    """Raw content of one operation: type id, real attributes, output shape."""

    op_type: int
    attrs: tuple[float, ...] = ()
    shape: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "attrs", tuple(float(a) for a in self.attrs))
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not 0 <= int(self.op_type) < NUM_OP_TYPES:
            raise DescriptorError(f"op_type {self.op_type} outside [0, {NUM_OP_TYPES})")
        if len(self.attrs) > MAX_ATTRS:
            raise DescriptorError(f"at most {MAX_ATTRS} attributes, got {len(self.attrs)}")
        if not all(math.isfinite(a) for a in self.attrs):
            raise DescriptorError("attributes must be finite")
        if len(self.shape) > MAX_SHAPE or any(s < 0 for s in self.shape):
            raise DescriptorError(f"shape must hold <= {MAX_SHAPE} non-negative ints")


@dataclass(frozen=True, eq=False)
class Dag:
    """Immutable DAG ``G = (V, E, Z)``; validated on construction."""

    n: int
    adj: np.ndarray
    nodes: tuple[NodeDescriptor, ...] = field(default=())

    def __post_init__(self):
        adj = np.array(self.adj, dtype=bool)
        adj.setflags(write=False)
        object.__setattr__(self, "adj", adj)
        nodes = tuple(self.nodes) or tuple(NodeDescriptor(0) for _ in range(self.n))
        object.__setattr__(self, "nodes", nodes)
        validate_dag(self)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[Sequence[int]], nodes=None) -> "Dag":
        adj = np.zeros((n, n), dtype=bool)
        for src, dst in edges:
            if not (0 <= src < n and 0 <= dst < n):
                raise ShapeMismatch(f"edge ({src}, {dst}) out of range for n={n}")
            adj[src, dst] = True
        if nodes is not None:
            nodes = [nd if isinstance(nd, NodeDescriptor) else NodeDescriptor(int(nd))
                     for nd in nodes]
        return cls(n, adj, tuple(nodes or ()))

    @property
    def edges(self) -> list[tuple[int, int]]:
        src, dst = np.nonzero(self.adj)
        return list(zip(src.tolist(), dst.tolist()))

    @property
    def op_types(self) -> np.ndarray:
        return np.array([nd.op_type for nd in self.nodes], dtype=np.int64)

    def permute(self, perm: Sequence[int]) -> "Dag":
        """Relabel so that old node ``i`` becomes new node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        adj = self.adj[np.ix_(inv, inv)]
        nodes = tuple(self.nodes[i] for i in inv)
        return Dag(self.n, adj, nodes)

    def topological_order(self) -> list[int]:
        return _kahn(self.adj)[0]

    def __eq__(self, other):
        if not isinstance(other, Dag):
            return NotImplemented
        return (self.n == other.n and np.array_equal(self.adj, other.adj)
                and self.nodes == other.nodes)

    def __hash__(self):
        return hash((self.n, self.adj.tobytes(), self.nodes))


def _kahn(adj: np.ndarray) -> tuple[list[int], np.ndarray]:
    indeg = adj.sum(axis=0).astype(np.int64)
    queue = deque(np.flatnonzero(indeg == 0).tolist())
    order = []
    while queue:
        u = queue.popleft()
        order.append(u)
        for v in np.flatnonzero(adj[u]).tolist():
            indeg[v] -= 1
            if indeg[v] == 0:
                queue.append(v)
    return order, indeg


def _find_cycle(adj: np.ndarray, candidates: np.ndarray) -> list[int]:
    # every remaining node has an in-edge from another remaining node;
    # walk predecessors until a node repeats
    remaining = set(candidates.tolist())
    start = min(remaining)
    seen: dict[int, int] = {}
    path = []
    u = start
    while u not in seen:
        seen[u] = len(path)
        path.append(u)
        preds = [p for p in np.flatnonzero(adj[:, u]).tolist() if p in remaining]
        u = min(preds)
    cycle = path[seen[u]:][::-1]
    k = cycle.index(min(cycle))
    return cycle[k:] + cycle[:k]


def validate_dag(dag: Dag) -> None:
    """Raise unless ``dag`` is square, loop-free and acyclic."""
    adj = np.asarray(dag.adj)
    n = dag.n
    if not 1 <= n <= MAX_NODES:
        raise ShapeMismatch(f"node count {n} outside [1, {MAX_NODES}]")
    if adj.shape != (n, n):
        raise ShapeMismatch(f"adjacency shape {adj.shape} does not match n={n}")
    if len(dag.nodes) != n:
        raise ShapeMismatch(f"{len(dag.nodes)} descriptors for {n} nodes")
    loops = np.flatnonzero(np.diag(adj))
    if loops.size:
        raise SelfLoop(loops[0])
    order, indeg = _kahn(adj)
    if len(order) < n:
        raise CycleDetected(_find_cycle(adj, np.flatnonzero(indeg > 0)))


def sibling_masks(dag: Dag) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(common_child, common_parent)`` as boolean matrices.

    ``common_child[k, j]`` holds when some ``v`` has edges ``k -> v`` and
    ``j -> v`` (Boolean ``A A^T``); ``common_parent[k, j]`` when some ``v``
    has edges ``v -> k`` and ``v -> j`` (Boolean ``A^T A``).
    """
    a = dag.adj.astype(np.int64)
    return (a @ a.T) > 0, (a.T @ a) > 0


class MaskKind(str, enum.Enum):
    SELF_FWD = "SelfFwd"
    SELF_BWD = "SelfBwd"
    SELF_COMMON_CHILD = "SelfCommonChild"
    SELF_COMMON_PARENT = "SelfCommonParent"
    GLOBAL = "Global"
    TWO_HOP_FWD = "TwoHopFwd"
    TWO_HOP_BWD = "TwoHopBwd"


class MaskVariant(str, enum.Enum):
    ASMA_DEFAULT = "AsmaDefault"
    FWD_ONLY = "FwdOnly"
    BWD_ONLY = "BwdOnly"
    FWD_BWD = "FwdBwd"
    TWO_HOP = "TwoHop"
    GLOBAL_ALL = "GlobalAll"

    @classmethod
    def parse(cls, value) -> "MaskVariant":
        try:
            return cls(value)
        except ValueError:
            raise UnknownVariant(f"unknown mask variant {value!r}; "
                                 f"expected one of {[v.value for v in cls]}") from None


_K = MaskKind
VARIANT_KINDS: dict[MaskVariant, tuple[MaskKind, ...]] = {
    MaskVariant.ASMA_DEFAULT: (_K.SELF_FWD, _K.SELF_BWD, _K.SELF_COMMON_PARENT, _K.SELF_COMMON_CHILD),
    MaskVariant.FWD_ONLY: (_K.SELF_FWD,) * 4,
    MaskVariant.BWD_ONLY: (_K.SELF_BWD,) * 4,
    MaskVariant.FWD_BWD: (_K.SELF_FWD, _K.SELF_FWD, _K.SELF_BWD, _K.SELF_BWD),
    MaskVariant.TWO_HOP: (_K.SELF_FWD, _K.SELF_BWD, _K.TWO_HOP_FWD, _K.TWO_HOP_BWD),
    MaskVariant.GLOBAL_ALL: (_K.GLOBAL,) * 4,
}


def mask_matrix(adj: np.ndarray, kind: MaskKind) -> np.ndarray:
    """Boolean ``I + M`` for the topology ``M`` named by ``kind``."""
    a = np.asarray(adj, dtype=np.int64)
    n = a.shape[0]
    if kind is MaskKind.GLOBAL:
        return np.ones((n, n), dtype=bool)
    m = {
        MaskKind.SELF_FWD: lambda: a,
        MaskKind.SELF_BWD: lambda: a.T,
        MaskKind.SELF_COMMON_CHILD: lambda: a @ a.T,
        MaskKind.SELF_COMMON_PARENT: lambda: a.T @ a,
        MaskKind.TWO_HOP_FWD: lambda: a @ a,
        MaskKind.TWO_HOP_BWD: lambda: a.T @ a.T,
    }[MaskKind(kind)]()
    out = m > 0
    np.fill_diagonal(out, True)
    return out


@dataclass(frozen=True)
class MaskSet:
    masks: tuple[np.ndarray, ...]
    labels: tuple[MaskKind, ...]

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, i):
        return self.masks[i]


def build_mask_set(dag: Dag, variant=MaskVariant.ASMA_DEFAULT, heads: int = 4) -> MaskSet:
    """Per-head attention masks for ``variant``.

    The four-entry pattern of each variant is tiled when ``heads`` is a
    larger multiple of four.
    """
    kinds = VARIANT_KINDS[MaskVariant.parse(variant)]
    if heads % len(kinds):
        raise ShapeMismatch(f"heads={heads} is not a multiple of {len(kinds)}")
    kinds = kinds * (heads // len(kinds))
    cache: dict[MaskKind, np.ndarray] = {}
    for k in kinds:
        if k not in cache:
            cache[k] = mask_matrix(dag.adj, k)
    return MaskSet(tuple(cache[k] for k in kinds), kinds)


# --- directed Weisfeiler-Lehman -------------------------------------------------

def _neighbours(adj: np.ndarray, directed: bool):
    if directed:
        succ = [np.flatnonzero(row) for row in adj]
        pred = [np.flatnonzero(col) for col in adj.T]
        return succ, pred
    und = adj | adj.T
    return [np.flatnonzero(row) for row in und], None


def _joint_refine(dags: Sequence[Dag], iters: int, directed: bool):
    """Refine several graphs with one shared palette; yields colour lists per round."""
    if iters < 1:
        raise ValueError("iters must be positive")
    nbrs = [_neighbours(d.adj, directed) for d in dags]
    palette = {op: i for i, op in enumerate(sorted({int(o) for d in dags for o in d.op_types}))}
    colors = [np.array([palette[int(o)] for o in d.op_types], dtype=np.int64) for d in dags]
    n_classes = len(palette)
    yield colors
    for _ in range(iters):
        sigs = []
        for c, (first, second) in zip(colors, nbrs):
            rows = []
            for v in range(len(c)):
                fwd = tuple(sorted(c[first[v]].tolist()))
                if second is None:
                    rows.append((int(c[v]), fwd))
                else:
                    rows.append((int(c[v]), fwd, tuple(sorted(c[second[v]].tolist()))))
            sigs.append(rows)
        table = {s: i for i, s in enumerate(sorted({s for rows in sigs for s in rows}))}
        colors = [np.array([table[s] for s in rows], dtype=np.int64) for rows in sigs]
        yield colors
        if len(table) == n_classes:
            return
        n_classes = len(table)


def wl_refine_directed(dag: Dag, iters: int, directed: bool = True):
    """Colour refinement using separate successor and predecessor multisets.

    Returns ``(colors, multiset)`` where ``multiset`` is the sorted tuple of
    final colour ids. Colour ids are assigned by sorting signatures, so they
    do not depend on node numbering. Stops early once the partition is
    stable. With ``directed=False`` the symmetrised neighbourhood is used.
    """
    for colors in _joint_refine([dag], iters, directed):
        pass
    c = colors[0]
    return c, tuple(sorted(c.tolist()))


def wl_distinguishes(dag1: Dag, dag2: Dag, iters: int, directed: bool = True) -> bool:
    """True iff joint refinement yields different colour multisets."""
    if dag1.n != dag2.n:
        return True
    for c1, c2 in _joint_refine([dag1, dag2], iters, directed):
        if sorted(c1.tolist()) != sorted(c2.tolist()):
            return True
    return False
