"""
Directed vs symmetrised feed-forward
====================================

Path a->b->c and fork a->b<-c look the same once edge direction is dropped.
A freshly initialised block with the bidirectional FFN keeps them apart;
the symmetric-Laplacian FFN cannot.
"""

import itertools

import numpy as np

from dagpred import Dag, EncodingConfig, ModelConfig, NodeDescriptor, init_params
from dagpred.model import GraphBatch, encode_nodes, prepare_graph

enc = EncodingConfig.accuracy()
ops = [NodeDescriptor(0)] * 3
path = Dag.from_edges(3, [(0, 1), (1, 2)], ops)
fork = Dag.from_edges(3, [(0, 1), (2, 1)], ops)


def features(dag, cfg, params):
    return encode_nodes(GraphBatch([prepare_graph(dag, enc, cfg)]), params, cfg).data


def multiset_gap(x, y):
    # best row matching, since node order carries no meaning
    return min(np.abs(x[list(p)] - y).max() for p in itertools.permutations(range(len(x))))


for ffn in ("BgiDefault", "SymmetricLaplacian"):
    cfg = ModelConfig(channels=16, blocks=1, dropout=0.0, readout="SumNodes",
                      ffn_variant=ffn, input_dim=enc.total_dim)
    gaps = [multiset_gap(features(path, cfg, p), features(fork, cfg, p))
            for p in (init_params(cfg, seed) for seed in range(20))]
    print(f"{ffn:20s} smallest gap {min(gaps):.2e}, largest {max(gaps):.2e}")
