"""Ranking and error metrics: Kendall's tau, MAPE and error-bound accuracy."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AllTied, LengthMismatch, NonPositiveGroundTruth


def _pair(pred, gt):
    p = np.asarray(pred, dtype=np.float64).ravel()
    g = np.asarray(gt, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise LengthMismatch(f"lengths differ: {p.size} vs {g.size}")
    return p, g


def _tie_pairs(x: np.ndarray) -> int:
    _, counts = np.unique(x, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _count_inversions(y: np.ndarray) -> int:
    """Pairs ``i < j`` with ``y[i] > y[j]`` via a Fenwick tree over dense ranks."""
    _, ranks = np.unique(y, return_inverse=True)
    size = int(ranks.max()) + 1 if ranks.size else 0
    tree = [0] * (size + 1)
    inv = 0
    seen = 0
    for r in ranks.tolist():
        # count previously inserted values <= r
        i, le = r + 1, 0
        while i > 0:
            le += tree[i]
            i -= i & -i
        inv += seen - le
        i = r + 1
        while i <= size:
            tree[i] += 1
            i += i & -i
        seen += 1
    return inv


def concordance_counts(pred, gt) -> tuple[int, int, int, int, int]:
    """``(n0, C - D, ties_pred, ties_gt, ties_both)`` with ``n0 = n(n-1)/2``."""
    p, g = _pair(pred, gt)
    n = p.size
    order = np.lexsort((g, p))
    p, g = p[order], g[order]
    n0 = n * (n - 1) // 2
    t_p = _tie_pairs(p)
    t_g = _tie_pairs(g)
    t_both = _tie_pairs(p + 1j * g) if n else 0
    discordant = _count_inversions(g)
    concordant_minus = n0 - t_p - t_g + t_both - 2 * discordant
    return n0, concordant_minus, t_p, t_g, t_both


def kendall_tau(pred, gt, variant: str = "b") -> float:
    """Kendall rank correlation; tau-b (tie-corrected) by default, ``variant="a"`` for tau-a."""
    p, g = _pair(pred, gt)
    if p.size < 2:
        raise LengthMismatch("kendall_tau needs at least two samples")
    n0, s, t_p, t_g, _ = concordance_counts(p, g)
    if variant == "a":
        return s / n0
    if variant != "b":
        raise ValueError(f"unknown tau variant {variant!r}")
    denom = math.sqrt((n0 - t_p) * (n0 - t_g))
    if denom == 0:
        raise AllTied("one of the inputs is constant; tau-b is undefined")
    return max(-1.0, min(1.0, s / denom))


def _check_gt(g: np.ndarray):
    if g.size == 0:
        raise LengthMismatch("empty input")
    if not (g > 0).all():
        raise NonPositiveGroundTruth("ground truth must be strictly positive")


def mape(pred, gt) -> float:
    p, g = _pair(pred, gt)
    _check_gt(g)
    return float(100.0 * np.mean(np.abs(p - g) / g))


def acc_delta(pred, gt, delta: float) -> float:
    """Fraction of samples with relative error ``<= delta``."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    p, g = _pair(pred, gt)
    _check_gt(g)
    return float(np.mean(np.abs(p - g) / g <= delta))


@dataclass
class EvalReport:
    n: int
    kendall_tau: float | None = None
    mape: float | None = None
    acc_delta: dict[float, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict = {"n": self.n}
        if self.kendall_tau is not None:
            out["kendall_tau"] = self.kendall_tau
        if self.mape is not None:
            out["mape"] = self.mape
        for d, v in sorted(self.acc_delta.items()):
            out[f"acc@{d:.2f}"] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def evaluate(pred, gt, metrics=("kt", "mape", "acc"), deltas=(0.1,)) -> EvalReport:
    p, g = _pair(pred, gt)
    rep = EvalReport(n=int(p.size))
    if "kt" in metrics:
        rep.kendall_tau = kendall_tau(p, g)
    if "mape" in metrics:
        rep.mape = mape(p, g)
    if "acc" in metrics:
        rep.acc_delta = {float(d): acc_delta(p, g, d) for d in deltas}
    return rep
