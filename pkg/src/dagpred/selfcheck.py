"""Finite-difference self-check of the full model on a small random graph."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckReport
from .dag import Dag, NodeDescriptor
from .encoding import EncodingConfig
from .model import GraphBatch, ModelConfig, forward_batch, init_params, prepare_graph


def random_small_dag(n: int, seed: int, latency: bool = False) -> Dag:
    """Connected-ish random DAG: each node ``j > 0`` gets a parent among ``0..j-1``."""
    rng = np.random.default_rng([seed, 3])
    edges = set()
    for j in range(1, n):
        edges.add((int(rng.integers(j)), j))
        for i in range(j):
            if rng.random() < 0.3:
                edges.add((i, j))
    nodes = []
    for _ in range(n):
        op = int(rng.integers(8))
        if latency:
            attrs = tuple(int(a) for a in rng.integers(1, 64, size=int(rng.integers(1, 4))))
            shape = tuple(int(s) for s in rng.integers(1, 224, size=int(rng.integers(1, 5))))
            nodes.append(NodeDescriptor(op, attrs, shape))
        else:
            nodes.append(NodeDescriptor(op))
    return Dag.from_edges(n, sorted(edges), nodes)


def grad_check_model(preset: str = "accuracy", seed: int = 0, dropout_on: bool = False,
                     channels: int = 16, blocks: int = 2, n_nodes: int = 5,
                     h: float = 1e-5, tol: float = 1e-4,
                     max_per_param: int | None = 64) -> GradCheckReport:
    """Check every parameter of a ``channels``-wide, ``blocks``-deep model.

    Dropout is off unless ``dropout_on``; then each forward pass draws fresh
    masks and the check stops with ``NonDeterministicFunction``. Every
    parameter tensor is probed; at most ``max_per_param`` seeded coordinates
    each (``None`` probes all of them).
    """
    enc = getattr(EncodingConfig, preset)()
    base = getattr(ModelConfig, preset)()
    cfg = ModelConfig(channels=channels, blocks=blocks, heads=4,
                      dropout=0.1 if dropout_on else 0.0, readout=base.readout,
                      input_dim=enc.total_dim)
    params = init_params(cfg, seed)
    # larger weights than the training init so every path carries signal
    rng = np.random.default_rng([seed, 0, 1])
    for name, t in params.items():
        if not name.endswith(("gamma", "beta")):
            t.data[...] = rng.normal(0.0, 0.3, size=t.shape)
    batch = GraphBatch([prepare_graph(random_small_dag(n_nodes, seed, preset == "latency"),
                                      enc, cfg)])
    drop_rng = np.random.default_rng([seed, 2])

    def loss():
        pred = forward_batch(batch, params, cfg, train=dropout_on, rng=drop_rng)
        return ad.mse_loss(pred, np.array([0.5]))

    return ad.finite_diff_check(loss, params, h=h, tol=tol, max_per_param=max_per_param, seed=seed)
