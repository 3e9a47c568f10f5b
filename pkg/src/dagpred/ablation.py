"""Grid sweeps over (mask variant, FFN variant, seed) on one shared data split."""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

from .dag import MaskVariant
from .datasets import split
from .encoding import EncodingConfig
from .errors import ConfigError, DagpredError, UnknownVariant
from .model import FfnVariant, ModelConfig
from .train import TrainConfig, fit


@dataclass(frozen=True)
class Cell:
    mask_variant: MaskVariant
    ffn_variant: FfnVariant
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "mask_variant", MaskVariant.parse(self.mask_variant))
        object.__setattr__(self, "ffn_variant", FfnVariant.parse(self.ffn_variant))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass
class CellResult:
    cell: Cell
    val_kendall_tau: float
    best_val_kendall_tau: float
    seconds: float
    status: str = "ok"

    def row(self) -> list:
        return [self.cell.mask_variant.value, self.cell.ffn_variant.value, self.cell.seed,
                repr(self.val_kendall_tau), repr(self.best_val_kendall_tau), self.status]


# wall time is kept off the table so seeded reruns produce identical files
CSV_FIELDS = ("mask_variant", "ffn_variant", "seed", "val_kendall_tau",
              "best_val_kendall_tau", "status")


def read_grid(path) -> list[Cell]:
    """CSV rows ``mask_variant,ffn_variant,seed``; a header row and ``#`` comments are skipped."""
    cells = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read grid {path}: {exc}") from None
    for lineno, row in enumerate(csv.reader(lines), 1):
        row = [c.strip() for c in row]
        if not row or not any(row) or row[0].startswith("#"):
            continue
        if lineno == 1 and row[0] == "mask_variant":
            continue
        if len(row) != 3:
            raise ConfigError(f"grid line {lineno}: expected 3 columns, got {len(row)}")
        try:
            cells.append(Cell(MaskVariant.parse(row[0]), FfnVariant.parse(row[1]), int(row[2])))
        except (UnknownVariant, ValueError) as exc:
            raise ConfigError(f"grid line {lineno}: {exc}") from None
    if not cells:
        raise ConfigError(f"grid {path} has no cells")
    return cells


def run_cell(cell: Cell, train_records, val_records, model_cfg: ModelConfig,
             train_cfg: TrainConfig, enc: EncodingConfig) -> CellResult:
    """Train one cell from scratch; failures become a ``status`` string, not an exception."""
    start = time.perf_counter()
    mc = replace(model_cfg, mask_variant=cell.mask_variant, ffn_variant=cell.ffn_variant)
    tc = replace(train_cfg, seed=cell.seed)
    try:
        res = fit(train_records, val_records, mc, tc, enc)
    except DagpredError as exc:
        return CellResult(cell, math.nan, math.nan, time.perf_counter() - start,
                          f"error: {type(exc).__name__}: {exc}")
    best = max((r.val_metric for r in res.history if math.isfinite(r.val_metric)),
               default=math.nan)
    final = res.history[-1].val_metric if res.history else math.nan
    return CellResult(cell, final, best, time.perf_counter() - start)


def _run_cell_star(args):
    return run_cell(*args)


def run_ablation(records: Sequence, cells: Sequence[Cell], model_cfg: ModelConfig,
                 train_cfg: TrainConfig, enc: EncodingConfig,
                 fractions=(0.8, 0.1, 0.1), split_seed: int = 0,
                 workers: int | None = 1) -> list[CellResult]:
    """Every cell sees the same train/val split; results keep grid order.

    ``workers=None`` uses one process per available CPU. Each cell is
    isolated, so the table does not depend on the worker count.
    """
    if not cells:
        raise ConfigError("empty ablation grid")
    train_recs, val_recs, _ = split(records, fractions, split_seed)
    jobs = [(c, train_recs, val_recs, model_cfg, train_cfg, enc) for c in cells]
    if workers is None:
        workers = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    workers = max(1, min(int(workers or 1), len(jobs)))
    if workers == 1:
        return [_run_cell_star(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell_star, jobs))


def write_csv(results: Sequence[CellResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for r in results:
            w.writerow(r.row())
    return path
