"""The graph-transformer predictor: masked multi-head attention over adjacency
and sibling masks, a bidirectional graph-aggregating feed-forward network,
pre-norm residual blocks and a graph-level readout.

Graphs are processed in packed batches: node rows of all graphs are stacked
into one matrix, attention masks and adjacency operators are block-diagonal,
so no information crosses graph boundaries and no padding is needed.
"""

from __future__ import annotations

import base64
import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import SparsePattern, Tensor
from .dag import Dag, MaskSet, MaskVariant, build_mask_set
from .encoding import EncodingConfig, encode_graph
from .errors import CheckpointMismatch, NonFinite, ShapeMismatch, UnknownVariant


class FfnVariant(str, enum.Enum):
    BGI_DEFAULT = "BgiDefault"
    FWD_ONLY_SPLIT = "FwdOnlySplit"
    BWD_ONLY_SPLIT = "BwdOnlySplit"
    FOUR_SPLIT = "FourSplit"
    SYMMETRIC_LAPLACIAN = "SymmetricLaplacian"
    MULTIPLY_COMBINE = "MultiplyCombine"
    PLAIN_FFN = "PlainFfn"

    @classmethod
    def parse(cls, value) -> "FfnVariant":
        try:
            return cls(value)
        except ValueError:
            raise UnknownVariant(f"unknown ffn variant {value!r}; "
                                 f"expected one of {[v.value for v in cls]}") from None


class Readout(str, enum.Enum):
    CLASS_TOKEN = "ClassToken"
    SUM_NODES = "SumNodes"

    @classmethod
    def parse(cls, value) -> "Readout":
        try:
            return cls(value)
        except ValueError:
            raise UnknownVariant(f"unknown readout {value!r}") from None


# (parameter suffix, operator key, share of the hidden width)
_F = FfnVariant
FFN_BRANCHES: dict[FfnVariant, tuple[tuple[str, str, int], ...]] = {
    _F.BGI_DEFAULT: (("gc_fwd", "A", 2), ("gc_bwd", "At", 2)),
    _F.FWD_ONLY_SPLIT: (("gc_fwd", "A", 1),),
    _F.BWD_ONLY_SPLIT: (("gc_bwd", "At", 1),),
    _F.FOUR_SPLIT: (("gc_fwd", "A", 4), ("gc_bwd", "At", 4),
                    ("gc_cp", "AtA", 4), ("gc_cc", "AAt", 4)),
    _F.SYMMETRIC_LAPLACIAN: (("gc_a", "L", 2), ("gc_b", "L", 2)),
    _F.MULTIPLY_COMBINE: (("gc_fwd", "A", 2), ("gc_bwd", "At", 2)),
    _F.PLAIN_FFN: (),
}


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 160
    blocks: int = 12
    heads: int = 4
    ffn_expansion: int = 4
    dropout: float = 0.1
    mask_variant: MaskVariant = MaskVariant.ASMA_DEFAULT
    ffn_variant: FfnVariant = FfnVariant.BGI_DEFAULT
    readout: Readout = Readout.CLASS_TOKEN
    input_dim: int = 32
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "mask_variant", MaskVariant.parse(self.mask_variant))
        object.__setattr__(self, "ffn_variant", FfnVariant.parse(self.ffn_variant))
        object.__setattr__(self, "readout", Readout.parse(self.readout))
        if self.channels < 1 or self.blocks < 0 or self.heads < 1:
            raise ShapeMismatch("channels, heads must be positive and blocks >= 0")
        if self.channels % self.heads:
            raise ShapeMismatch(f"channels={self.channels} not divisible by heads={self.heads}")
        if self.hidden % 4:
            raise ShapeMismatch("ffn hidden width must be divisible by 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads

    @property
    def hidden(self) -> int:
        return self.channels * self.ffn_expansion

    @classmethod
    def accuracy(cls, **kw) -> "ModelConfig":
        base = dict(channels=160, blocks=12, dropout=0.1, readout=Readout.CLASS_TOKEN,
                    input_dim=EncodingConfig.accuracy().total_dim)
        return cls(**{**base, **kw})

    @classmethod
    def latency(cls, **kw) -> "ModelConfig":
        base = dict(channels=512, blocks=2, dropout=0.05, readout=Readout.SUM_NODES,
                    input_dim=EncodingConfig.latency().total_dim)
        return cls(**{**base, **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("mask_variant", "ffn_variant", "readout"):
            d[k] = d[k].value
        return d


Params = dict  # name -> Tensor


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hid = cfg.channels, cfg.hidden
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (cfg.input_dim, d),
        "embed.bias": (d,),
        "embed.norm.gamma": (d,),
        "embed.norm.beta": (d,),
    }
    if cfg.readout is Readout.CLASS_TOKEN:
        shapes["cls_token"] = (1, d)
    for l in range(cfg.blocks):
        p = f"blocks.{l}"
        shapes.update({
            f"{p}.attn_norm.gamma": (d,), f"{p}.attn_norm.beta": (d,),
            f"{p}.attn.wq": (d, d), f"{p}.attn.wk": (d, d),
            f"{p}.attn.wv": (d, d), f"{p}.attn.wo": (d, d),
            f"{p}.ffn_norm.gamma": (d,), f"{p}.ffn_norm.beta": (d,),
            f"{p}.ffn.w1": (d, hid), f"{p}.ffn.bias1": (hid,),
        })
        for suffix, _, share in FFN_BRANCHES[cfg.ffn_variant]:
            shapes[f"{p}.ffn.{suffix}"] = (d, hid // share)
        shapes[f"{p}.ffn.w2"] = (hid, d)
        shapes[f"{p}.ffn.bias2"] = (d,)
    if cfg.readout is Readout.SUM_NODES:
        shapes.update({"head.w1": (d, d), "head.bias1": (d,),
                       "head.w2": (d, 1), "head.bias2": (1,)})
    else:
        shapes.update({"head.w": (d, 1), "head.bias": (1,)})
    return shapes


def is_no_decay(name: str) -> bool:
    """Layer-norm affine parameters and biases are excluded from weight decay."""
    last = name.rsplit(".", 1)[-1]
    return last in ("gamma", "beta") or last.startswith("bias")


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> Params:
    """Weights ~ N(0, std) truncated at 2 std; LN gamma=1, beta=0; biases 0."""
    rng = np.random.default_rng([seed, 0])  # "init" sub-stream
    params = {}
    for name, shape in param_shapes(cfg).items():
        last = name.rsplit(".", 1)[-1]
        if last == "gamma":
            data = np.ones(shape)
        elif last == "beta" or last.startswith("bias"):
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, std)
        params[name] = Tensor(data, requires_grad=True)
    return params


# --- graph preparation and packed batches -------------------------------------

@dataclass(eq=False)
class GraphInput:
    """Per-graph precomputation reused across epochs."""

    n: int
    z: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    head_coo: tuple[tuple[np.ndarray, np.ndarray], ...]
    token: bool


def prepare_graph(dag: Dag, enc: EncodingConfig, cfg: ModelConfig) -> GraphInput:
    z = encode_graph(dag, enc)
    if z.shape[1] != cfg.input_dim:
        raise ShapeMismatch(f"encoding width {z.shape[1]} != model input_dim {cfg.input_dim}")
    masks = build_mask_set(dag, cfg.mask_variant, cfg.heads)
    return _graph_input(dag, z, masks, cfg.readout is Readout.CLASS_TOKEN)


def _graph_input(dag: Dag, z: np.ndarray, masks: MaskSet, token: bool) -> GraphInput:
    n = dag.n
    coo = []
    cache: dict[int, tuple] = {}
    for m in masks.masks:
        key = id(m)
        if key not in cache:
            if token:
                ext = np.ones((n + 1, n + 1), dtype=bool)
                ext[:n, :n] = m
                m = ext
            cache[key] = np.nonzero(m)
        coo.append(cache[key])
    src, dst = np.nonzero(dag.adj)
    return GraphInput(n, z, src, dst, tuple(coo), token)


class GraphBatch:
    """Block-diagonal packing of several prepared graphs."""

    def __init__(self, graphs: Sequence[GraphInput]):
        if not graphs:
            raise ShapeMismatch("empty batch")
        token = graphs[0].token
        self.size = len(graphs)
        self.token = token
        sizes = np.array([g.n for g in graphs])
        blocks = sizes + int(token)
        offsets = np.concatenate([[0], np.cumsum(blocks)])
        self.total = int(offsets[-1])
        self.num_nodes = int(sizes.sum())
        self.z = np.concatenate([g.z for g in graphs])
        node_rows = np.concatenate([np.arange(o, o + n) for o, n in zip(offsets, sizes)])
        graph_of_row = np.repeat(np.arange(self.size), blocks)
        self.node_rows = node_rows
        self.token_rows = offsets[:-1] + sizes if token else None
        N = self.total
        self.place_nodes = sp.csr_matrix(
            (np.ones(self.num_nodes), (node_rows, np.arange(self.num_nodes))),
            shape=(N, self.num_nodes))
        if token:
            self.place_token = sp.csr_matrix(
                (np.ones(self.size), (self.token_rows, np.zeros(self.size, dtype=int))),
                shape=(N, 1))
            self.readout = sp.csr_matrix(
                (np.ones(self.size), (np.arange(self.size), self.token_rows)),
                shape=(self.size, N))
        else:
            self.place_token = None
            self.readout = sp.csr_matrix(
                (np.ones(self.num_nodes), (graph_of_row[node_rows], node_rows)),
                shape=(self.size, N))
        src = np.concatenate([g.src + o for g, o in zip(graphs, offsets)])
        dst = np.concatenate([g.dst + o for g, o in zip(graphs, offsets)])
        self.A = sp.csr_matrix((np.ones(src.size), (src, dst)), shape=(N, N))
        heads = len(graphs[0].head_coo)
        patterns = []
        shared: dict[tuple, SparsePattern] = {}
        for h in range(heads):
            key = tuple(id(g.head_coo[h][0]) for g in graphs)
            if key not in shared:
                rows = np.concatenate([g.head_coo[h][0] + o for g, o in zip(graphs, offsets)])
                cols = np.concatenate([g.head_coo[h][1] + o for g, o in zip(graphs, offsets)])
                shared[key] = _sorted_pattern(N, rows, cols)
            patterns.append(shared[key])
        self.patterns = tuple(patterns)
        self._ops: dict[str, sp.spmatrix] = {}

    def operator(self, key: str):
        if key not in self._ops:
            A = self.A
            if key == "A":
                op = A
            elif key == "At":
                op = A.T.tocsr()
            elif key == "AtA":
                op = (A.T @ A).tocsr()
            elif key == "AAt":
                op = (A @ A.T).tocsr()
            elif key == "L":
                op = symmetric_laplacian(A)
            else:
                raise KeyError(key)
            self._ops[key] = op
        return self._ops[key]


def _sorted_pattern(n, rows, cols) -> SparsePattern:
    # per-graph coordinates are row-major and offsets increase, so rows are sorted
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    return SparsePattern(n, indptr, cols.astype(np.int32), rows.astype(np.int64))


def symmetric_laplacian(A) -> sp.csr_matrix:
    """``D^-1/2 (A + A^T) D^-1/2`` on the symmetrised graph; isolated nodes map to 0."""
    S = sp.csr_matrix(A, dtype=np.float64)
    S = (S + S.T).tocsr()
    S.data[:] = 1.0
    deg = np.asarray(S.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    inv[deg > 0] = deg[deg > 0] ** -0.5
    D = sp.diags(inv)
    return (D @ S @ D).tocsr()


# --- forward ------------------------------------------------------------------

def _patterns(masks) -> tuple[SparsePattern, ...]:
    if isinstance(masks, MaskSet) or (len(masks) and isinstance(masks[0], np.ndarray)):
        return tuple(SparsePattern.from_dense(m) for m in masks)
    return tuple(masks)


def asma_forward(H: Tensor, masks, params: Params, cfg: ModelConfig, prefix: str = "blocks.0.attn",
                 train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """Masked multi-head attention; ``masks`` is a MaskSet or sparse patterns.

    Head ``i`` uses column block ``i`` of ``wq``/``wk``/``wv`` as its own
    projection and is restricted to ``masks[i]``; the concatenated head
    outputs are mixed by ``wo``.
    """
    pats = _patterns(masks)
    if len(pats) != cfg.heads:
        raise ShapeMismatch(f"{len(pats)} masks for {cfg.heads} heads")
    q = ad.linear(H, params[f"{prefix}.wq"])
    k = ad.linear(H, params[f"{prefix}.wk"])
    v = ad.linear(H, params[f"{prefix}.wv"])
    p = cfg.dropout if train else 0.0
    x = ad.masked_attention(q, k, v, pats, math.sqrt(cfg.head_dim), p, rng)
    return ad.linear(x, params[f"{prefix}.wo"])


class _DenseOps:
    """Operator provider for a single unbatched adjacency matrix."""

    def __init__(self, adj):
        self.A = sp.csr_matrix(np.asarray(adj, dtype=np.float64))
        self._ops = {}

    operator = GraphBatch.operator


def bgiffn_forward(H: Tensor, adj, params: Params, cfg: ModelConfig,
                   prefix: str = "blocks.0.ffn", variant=None) -> Tensor:
    """``ReLU(H W1 + b1 (+|*) H_g) W2 + b2`` with ``H_g`` the concatenated
    graph-convolution branches of ``variant`` (``M H W`` per branch).

    ``adj`` is a raw directed adjacency matrix or a :class:`GraphBatch`.
    """
    variant = FfnVariant.parse(variant or cfg.ffn_variant)
    ops = adj if isinstance(adj, (GraphBatch, _DenseOps)) else _DenseOps(adj)
    hidden = ad.linear(H, params[f"{prefix}.w1"], params[f"{prefix}.bias1"])
    branches = [ad.aggregate(ops.operator(key), ad.linear(H, params[f"{prefix}.{suffix}"]))
                for suffix, key, _ in FFN_BRANCHES[variant]]
    if branches:
        hg = branches[0] if len(branches) == 1 else ad.concat_cols(branches)
        if variant is FfnVariant.MULTIPLY_COMBINE:
            hidden = ad.hadamard(hidden, hg)
        else:
            hidden = ad.add(hidden, hg)
    return ad.linear(ad.relu(hidden), params[f"{prefix}.w2"], params[f"{prefix}.bias2"])


def _ln(x, params, prefix, cfg):
    return ad.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], cfg.ln_eps)


def block_forward(H: Tensor, batch: GraphBatch, params: Params, cfg: ModelConfig, layer: int,
                  train: bool = False, rng=None) -> Tensor:
    p = f"blocks.{layer}"
    a = asma_forward(_ln(H, params, f"{p}.attn_norm", cfg), batch.patterns, params, cfg,
                     f"{p}.attn", train, rng)
    H = ad.add(H, ad.dropout(a, cfg.dropout, train, rng))
    f = bgiffn_forward(_ln(H, params, f"{p}.ffn_norm", cfg), batch, params, cfg, f"{p}.ffn")
    return ad.add(H, ad.dropout(f, cfg.dropout, train, rng))


def embed(batch: GraphBatch, params: Params, cfg: ModelConfig) -> Tensor:
    """``H0 = LN(FC(Z))`` with class-token rows inserted when configured."""
    h = ad.linear(Tensor(batch.z), params["embed.weight"], params["embed.bias"])
    h = _ln(h, params, "embed.norm", cfg)
    if batch.token:
        return ad.add(ad.aggregate(batch.place_nodes, h),
                      ad.aggregate(batch.place_token, params["cls_token"]))
    return h


def encode_nodes(batch: GraphBatch, params: Params, cfg: ModelConfig,
                 train: bool = False, rng=None, blocks: int | None = None) -> Tensor:
    """Packed node features after ``blocks`` blocks (default: all)."""
    H = embed(batch, params, cfg)
    for l in range(cfg.blocks if blocks is None else blocks):
        H = block_forward(H, batch, params, cfg, l, train, rng)
    return H


def forward_batch(batch: GraphBatch, params: Params, cfg: ModelConfig,
                  train: bool = False, rng=None) -> Tensor:
    """Predictions of shape ``(batch.size,)``."""
    H = encode_nodes(batch, params, cfg, train, rng)
    g = ad.aggregate(batch.readout, H)
    if cfg.readout is Readout.SUM_NODES:
        g = ad.relu(ad.linear(g, params["head.w1"], params["head.bias1"]))
        y = ad.linear(g, params["head.w2"], params["head.bias2"])
    else:
        y = ad.linear(g, params["head.w"], params["head.bias"])
    if not np.isfinite(y.data).all():
        raise NonFinite("non-finite prediction")
    return ad.reshape(y, (batch.size,))


def model_forward(dag: Dag, params: Params, cfg: ModelConfig, enc: EncodingConfig | None = None,
                  train: bool = False, rng=None) -> Tensor:
    """Scalar prediction for one graph (normalised target units)."""
    enc = enc or default_encoding(cfg)
    batch = GraphBatch([prepare_graph(dag, enc, cfg)])
    return ad.reshape(forward_batch(batch, params, cfg, train, rng), ())


def default_encoding(cfg: ModelConfig) -> EncodingConfig:
    for enc in (EncodingConfig.accuracy(), EncodingConfig.latency()):
        if enc.total_dim == cfg.input_dim:
            return enc
    raise ShapeMismatch(f"no default encoding of width {cfg.input_dim}")


# --- checkpoints ----------------------------------------------------------------

CHECKPOINT_FORMAT = "dagpred.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    encoding: EncodingConfig
    params: Params
    meta: dict = field(default_factory=dict)


def _arrays(params: Mapping) -> dict[str, np.ndarray]:
    return {k: (v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64))
            for k, v in params.items()}


def save_checkpoint(path, params: Mapping, cfg: ModelConfig, enc: EncodingConfig,
                    meta: dict | None = None) -> None:
    """JSON container: config echo plus base64 little-endian float64 arrays."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "encoding": enc.to_dict(),
        "meta": meta or {},
        "params": {
            k: {"shape": list(a.shape),
                "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode()}
            for k, a in _arrays(params).items()
        },
    }
    Path(path).write_text(json.dumps(blob))


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = json.loads(Path(path).read_text())
        if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
            raise CheckpointMismatch("not a checkpoint of a supported version")
        cfg = ModelConfig(**blob["model_config"])
        enc = EncodingConfig(**blob["encoding"])
        expected = param_shapes(cfg)
        params = {}
        for name, entry in blob["params"].items():
            arr = np.frombuffer(base64.b64decode(entry["data"], validate=True), dtype="<f8")
            params[name] = Tensor(arr.reshape(entry["shape"]).astype(np.float64), requires_grad=True)
    except CheckpointMismatch:
        raise
    except Exception as exc:  # malformed JSON, base64, shapes, config fields
        raise CheckpointMismatch(f"cannot read checkpoint {path}: {exc}") from exc
    if set(params) != set(expected) or any(params[k].shape != s for k, s in expected.items()):
        raise CheckpointMismatch("parameter names or shapes do not match the config echo")
    if enc.total_dim != cfg.input_dim:
        raise CheckpointMismatch("encoding width does not match model input_dim")
    return Checkpoint(cfg, enc, params, blob.get("meta", {}))
