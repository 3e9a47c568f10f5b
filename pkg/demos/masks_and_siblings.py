"""
Attention masks on a small DAG
==============================

A diamond with a tail: 0 feeds 1 and 2, both feed 3, and 3 feeds 4.
"""

import numpy as np

from dagpred import Dag, build_mask_set, sibling_masks
from dagpred.dag import wl_distinguishes

dag = Dag.from_edges(5, [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)])

# 1 and 2 share parent 0 and child 3, so they are siblings both ways
common_child, common_parent = sibling_masks(dag)
print("common child:\n", common_child.astype(int))
print("common parent:\n", common_parent.astype(int))

# each head of the default variant gets its own neighbourhood (with self-loops)
masks = build_mask_set(dag, "AsmaDefault")
for label, m in zip(masks.labels, masks):
    print(f"{label.value:18s} allowed per row: {m.sum(axis=1)}")

# the global variant turns the block into an ordinary transformer layer
print("GlobalAll is all ones:", bool(np.all(build_mask_set(dag, "GlobalAll")[0])))

# directed colour refinement tells apart graphs that the undirected one cannot
path = Dag.from_edges(3, [(0, 1), (1, 2)])
fork = Dag.from_edges(3, [(0, 1), (2, 1)])
print("directed WL separates path/fork:", wl_distinguishes(path, fork, 3))
print("undirected WL separates path/fork:", wl_distinguishes(path, fork, 3, directed=False))
