import gzip
import itertools
import json

import numpy as np
import pytest

from dagpred.dag import Dag, NodeDescriptor
from dagpred.datasets import (
    DEFAULT_OP_COSTS,
    DagRecord,
    SynthConfig,
    critical_path_cost,
    generate_synthetic,
    load_jsonl,
    save_jsonl,
    split,
    synthetic_target,
)
from dagpred.errors import EmptyInput, ParseError, ValidationError
from helpers import DIAMOND, random_dag


def brute_longest_path(dag, costs):
    """Enumerate every source-to-sink path explicitly."""
    children = [[] for _ in range(dag.n)]
    for u, v in dag.edges:
        children[u].append(v)
    has_parent = {v for _, v in dag.edges}
    best = 0.0

    def walk(u, acc):
        nonlocal best
        acc += costs[u]
        if not children[u]:
            best = max(best, acc)
        for v in children[u]:
            walk(v, acc)

    for s in range(dag.n):
        if s not in has_parent:
            walk(s, 0.0)
    return best


def test_chain_and_diamond_targets():
    unit = {0: 1.0}
    chain = Dag.from_edges(3, [(0, 1), (1, 2)])
    assert synthetic_target(chain, unit, 0.2) == pytest.approx(3.0)
    assert synthetic_target(Dag.from_edges(4, DIAMOND), unit, 0.2) == pytest.approx(3.2)


def test_critical_path_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(200):
        dag = random_dag(rng, int(rng.integers(1, 13)), p=0.35)
        costs = rng.uniform(0.1, 5.0, size=dag.n)
        assert critical_path_cost(dag, costs) == pytest.approx(brute_longest_path(dag, costs), abs=1e-12)


def test_generator_is_deterministic():
    a = generate_synthetic(SynthConfig(n_graphs=30, seed=3))
    b = generate_synthetic(SynthConfig(n_graphs=30, seed=3))
    assert a == b
    assert a != generate_synthetic(SynthConfig(n_graphs=30, seed=4))


def layers_of(dag):
    depth = np.zeros(dag.n, dtype=int)
    for u in dag.topological_order():
        for v in np.flatnonzero(dag.adj[u]):
            depth[v] = max(depth[v], depth[u] + 1)
    return depth


def test_generated_graphs_are_layered():
    cfg = SynthConfig(n_graphs=300, seed=1)
    costs = DEFAULT_OP_COSTS
    for rec in generate_synthetic(cfg):
        dag = rec.to_dag()
        assert 3 <= dag.n <= 48
        assert set(int(o) for o in dag.op_types) <= set(costs)
        parents = dag.adj.sum(axis=0)
        sources = np.flatnonzero(parents == 0)
        # node ids are layer-major, so sources form a prefix: the first layer
        assert np.array_equal(sources, np.arange(len(sources)))
        assert 1 <= len(sources) <= 4
        assert all(u < v for u, v in dag.edges)
        assert rec.target == pytest.approx(synthetic_target(dag, costs, 0.2))
        assert layers_of(dag).max() + 1 >= 3


def test_target_depends_on_topology():
    # few op types and small graphs so that equal (multiset, edge count) keys occur
    cfg = SynthConfig(n_graphs=1000, depth_min=3, depth_max=5, width_min=1, width_max=3,
                      op_costs={0: 1.0, 1: 2.5}, seed=0)
    recs = generate_synthetic(cfg)
    seen = {}
    for r in recs:
        key = (tuple(sorted(nd.op_type for nd in r.nodes)), len(r.edges))
        seen.setdefault(key, set()).add(round(r.target, 9))
    assert any(len(v) > 1 for v in seen.values())


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(depth_min=5, depth_max=4)
    with pytest.raises(ValueError):
        SynthConfig(extra_edge_prob=0.6)
    with pytest.raises(ValueError):
        SynthConfig(op_costs={0: -1.0})


def test_jsonl_round_trip(tmp_path):
    recs = generate_synthetic(SynthConfig(n_graphs=100, seed=2))
    recs.append(DagRecord((NodeDescriptor(3, (1.5, 0.1), (1, 64)),), (), 0.1 + 0.2))
    for name in ("d.jsonl", "d.jsonl.gz"):
        save_jsonl(recs, tmp_path / name)
        assert load_jsonl(tmp_path / name) == recs
    with gzip.open(tmp_path / "d.jsonl.gz", "rt") as fh:
        assert json.loads(fh.readline()).keys() == {"nodes", "edges", "target"}


def test_jsonl_errors(tmp_path):
    good = json.dumps({"nodes": [{"op": 0}, {"op": 1}], "edges": [[0, 1]], "target": 1.0})
    cyc = json.dumps({"nodes": [{"op": 0}, {"op": 1}], "edges": [[0, 1], [1, 0]], "target": 1.0})
    p = tmp_path / "x.jsonl"
    p.write_text(good + "\n" + cyc + "\n")
    with pytest.raises(ValidationError) as info:
        load_jsonl(p)
    assert info.value.index == 1
    p.write_text(good + "\n\n{not json\n")
    with pytest.raises(ParseError) as info:
        load_jsonl(p)
    assert info.value.line == 3
    p.write_text(json.dumps({"nodes": [], "edges": [], "target": 1.0, "extra": 1}) + "\n")
    with pytest.raises(ValidationError):
        load_jsonl(p)
    p.write_text("")
    assert load_jsonl(p) == []


def test_duplicate_edges_are_dropped():
    rec = DagRecord.from_json({"nodes": [{"op": 0}, {"op": 0}], "edges": [[0, 1], [0, 1]],
                               "target": 2.0})
    assert rec.edges == ((0, 1),)


def test_split():
    recs = list(range(100))
    tr, va, te = split(recs, (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert sorted(tr + va + te) == recs
    assert split(recs, (0.8, 0.1, 0.1), seed=0) == (tr, va, te)
    assert split(recs, (0.8, 0.1, 0.1), seed=1) != (tr, va, te)
    with pytest.raises(ValueError):
        split(recs, (1.0, 0.1, 0.0))
    with pytest.raises(EmptyInput):
        split([], (0.5, 0.5))
