"""Node feature encoding: one-hot op type plus sinusoidal attribute/shape blocks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .dag import Dag, MAX_ATTRS, MAX_SHAPE
from .errors import EncodingError, IndexOutOfRange, NonFinite


@dataclass(frozen=True)
class EncodingConfig:
    op_onehot_dim: int = 32
    attr_sin_dim: int = 80
    shape_sin_dim: int = 80
    base_frequency: float = 10000.0
    attr_slots: int = MAX_ATTRS
    shape_slots: int = MAX_SHAPE

    def __post_init__(self):
        if self.op_onehot_dim < 1:
            raise EncodingError("op_onehot_dim must be positive")
        for name, dim, slots in (("attr", self.attr_sin_dim, self.attr_slots),
                                 ("shape", self.shape_sin_dim, self.shape_slots)):
            if dim < 0 or dim % 2:
                raise EncodingError(f"{name}_sin_dim must be even and >= 0, got {dim}")
            if dim and (slots < 1 or dim % slots or (dim // slots) % 2):
                raise EncodingError(
                    f"{name}_sin_dim={dim} cannot be split into {slots} even-width blocks")
        if not self.base_frequency > 1:
            raise EncodingError("base_frequency must exceed 1")

    @property
    def total_dim(self) -> int:
        return self.op_onehot_dim + self.attr_sin_dim + self.shape_sin_dim

    @classmethod
    def latency(cls) -> "EncodingConfig":
        return cls(32, 80, 80)

    @classmethod
    def accuracy(cls) -> "EncodingConfig":
        return cls(32, 0, 0)

    def to_dict(self) -> dict:
        return asdict(self)


def one_hot(op_type: int, dim: int) -> np.ndarray:
    if not 0 <= op_type < dim:
        raise IndexOutOfRange(f"op_type {op_type} outside [0, {dim})")
    v = np.zeros(dim)
    v[op_type] = 1.0
    return v


def sinusoidal(x: float, dim: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved ``[sin(x/f_0), cos(x/f_0), sin(x/f_1), ...]`` with ``f_j = base**(2j/dim)``."""
    if dim % 2 or dim < 0:
        raise EncodingError(f"dim must be even, got {dim}")
    if not math.isfinite(x):
        raise NonFinite(f"cannot encode non-finite value {x!r}")
    freqs = base ** (np.arange(0, dim, 2) / dim)
    v = np.empty(dim)
    v[0::2] = np.sin(x / freqs)
    v[1::2] = np.cos(x / freqs)
    return v


def _blocks(values, slots: int, dim: int, base: float) -> np.ndarray:
    if dim == 0:
        if len(values):
            raise EncodingError("node carries values but the encoding budget is 0")
        return np.zeros(0)
    if len(values) > slots:
        raise EncodingError(f"{len(values)} values exceed {slots} encoding slots")
    width = dim // slots
    padded = list(values) + [0.0] * (slots - len(values))
    return np.concatenate([sinusoidal(float(x), width, base) for x in padded])


def encode_graph(dag: Dag, cfg: EncodingConfig) -> np.ndarray:
    """Return the ``n x cfg.total_dim`` input matrix for ``dag``."""
    rows = []
    cache: dict = {}
    for nd in dag.nodes:
        key = (nd.op_type, nd.attrs, nd.shape)
        if key not in cache:
            cache[key] = np.concatenate([
                one_hot(nd.op_type, cfg.op_onehot_dim),
                _blocks(nd.attrs, cfg.attr_slots, cfg.attr_sin_dim, cfg.base_frequency),
                _blocks(nd.shape, cfg.shape_slots, cfg.shape_sin_dim, cfg.base_frequency),
            ])
        rows.append(cache[key])
    return np.stack(rows)
