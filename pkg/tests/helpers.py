"""Shared graph builders and brute-force oracles for the test-suite."""

import itertools

import numpy as np
from hypothesis import strategies as st

from dagpred.dag import Dag, NodeDescriptor


def random_dag(rng, n, p=0.3, n_ops=4):
    """Random DAG: edges only from lower to higher id, then a random relabelling."""
    upper = np.triu(rng.random((n, n)) < p, k=1)
    perm = rng.permutation(n)
    adj = np.zeros((n, n), dtype=bool)
    adj[np.ix_(perm, perm)] = upper
    nodes = tuple(NodeDescriptor(int(o)) for o in rng.integers(0, n_ops, size=n))
    return Dag(n, adj, nodes)


@st.composite
def dags(draw, max_nodes=12, n_ops=4):
    n = draw(st.integers(1, max_nodes))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    keep = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    perm = draw(st.permutations(range(n)))
    ops = draw(st.lists(st.integers(0, n_ops - 1), min_size=n, max_size=n))
    edges = [(perm[i], perm[j]) for (i, j), k in zip(pairs, keep) if k]
    return Dag.from_edges(n, edges, [NodeDescriptor(o) for o in ops])


def parents_children(dag):
    parents = [set() for _ in range(dag.n)]
    children = [set() for _ in range(dag.n)]
    for u, v in dag.edges:
        children[u].add(v)
        parents[v].add(u)
    return parents, children


def brute_siblings(dag):
    """``(common_child, common_parent)`` by set intersection per node pair."""
    parents, children = parents_children(dag)
    cc = np.zeros((dag.n, dag.n), dtype=bool)
    cp = np.zeros((dag.n, dag.n), dtype=bool)
    for k, j in itertools.product(range(dag.n), repeat=2):
        cc[k, j] = bool(children[k] & children[j])
        cp[k, j] = bool(parents[k] & parents[j])
    return cc, cp


def brute_masks(dag):
    """Every mask kind by explicit neighbourhood enumeration."""
    n = dag.n
    parents, children = parents_children(dag)
    cc, cp = brute_siblings(dag)
    eye = np.eye(n, dtype=bool)
    fwd = np.zeros((n, n), dtype=bool)
    hop_f = np.zeros((n, n), dtype=bool)
    for u in range(n):
        for v in children[u]:
            fwd[u, v] = True
            for w in children[v]:
                hop_f[u, w] = True
    return {
        "SelfFwd": fwd | eye,
        "SelfBwd": fwd.T | eye,
        "SelfCommonChild": cc | eye,
        "SelfCommonParent": cp | eye,
        "TwoHopFwd": hop_f | eye,
        "TwoHopBwd": hop_f.T | eye,
        "Global": np.ones((n, n), dtype=bool),
    }


DIAMOND = [(0, 1), (0, 2), (1, 3), (2, 3)]


def diamond():
    return Dag.from_edges(4, DIAMOND)


def path3():
    return Dag.from_edges(3, [(0, 1), (1, 2)])


def fork3():
    # a -> b <- c
    return Dag.from_edges(3, [(0, 1), (2, 1)])


# acceptance verdict lines keyed by criterion number, printed in the terminal summary
ACCEPTANCE = {}
