"""Training loop: AdamW with decoupled weight decay, warmup followed by cosine
or linear decay, parameter EMA, MSE on min-max normalised targets."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoding import EncodingConfig
from .errors import AllTied, DivergedLoss, EmptyDataset, OutOfRange, ShapeMismatch
from .metrics import kendall_tau
from .model import (
    GraphBatch,
    ModelConfig,
    forward_batch,
    init_params,
    is_no_decay,
    prepare_graph,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class Schedule(str, enum.Enum):
    COSINE = "Cosine"
    LINEAR_DECAY = "LinearDecay"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3000
    warmup_epochs: int = 300
    lr_start: float = 1e-6
    lr_peak: float = 1e-4
    schedule: Schedule = Schedule.COSINE
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    ema_decay: float = 0.99
    batch_size: int | None = None
    seed: int = 0
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be non-negative")
        if self.epochs and not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if not 0 < self.lr_start < self.lr_peak:
            raise ValueError("need 0 < lr_start < lr_peak")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def accuracy(cls, **kw) -> "TrainConfig":
        return cls(**{**dict(epochs=3000, warmup_epochs=300, schedule=Schedule.COSINE), **kw})

    @classmethod
    def latency(cls, **kw) -> "TrainConfig":
        return cls(**{**dict(epochs=50, warmup_epochs=5, schedule=Schedule.LINEAR_DECAY), **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = self.schedule.value
        d["betas"] = list(self.betas)
        return d


def lr_at(epoch: float, cfg: TrainConfig) -> float:
    """Learning rate at a (possibly fractional) epoch."""
    if not 0 <= epoch <= cfg.epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * epoch / cfg.warmup_epochs
    t = (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs)
    if cfg.schedule is Schedule.COSINE:
        return cfg.lr_peak * (1 + math.cos(math.pi * t)) / 2
    return cfg.lr_peak * (1 - t)


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: AdamWState, lr: float, cfg: TrainConfig,
               no_decay: Callable[[str], bool] = is_no_decay) -> None:
    """One in-place decoupled AdamW update of every array in ``params``."""
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient of {name} has shape {g.shape}, expected {theta.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        wd = 0.0 if no_decay(name) else cfg.weight_decay
        if wd:
            update = update + wd * theta
        theta -= lr * update


def ema_update(ema: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray], decay: float) -> None:
    for name, e in ema.items():
        p = params[name]
        if p.shape != e.shape:
            raise ShapeMismatch(f"EMA shape mismatch for {name}")
        e *= decay
        e += (1 - decay) * p


@dataclass(frozen=True)
class TargetScaler:
    """Affine map of targets onto [0, 1] using train-split min/max."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, targets) -> "TargetScaler":
        t = np.asarray(targets, dtype=np.float64)
        return cls(float(t.min()), float(t.max()))

    @property
    def span(self) -> float:
        return self.hi - self.lo if self.hi > self.lo else 1.0

    def transform(self, y):
        return (np.asarray(y, dtype=np.float64) - self.lo) / self.span

    def inverse(self, y):
        return np.asarray(y, dtype=np.float64) * self.span + self.lo


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_mse: float
    val_metric: float
    val_metric_ema: float


@dataclass
class TrainResult:
    model_config: ModelConfig
    train_config: TrainConfig
    encoding: EncodingConfig
    scaler: TargetScaler
    final: dict
    best: dict
    best_ema: dict
    history: list[EpochRecord]
    best_epoch: int | None = None
    best_ema_epoch: int | None = None

    def predictor(self, which: str = "final") -> "Predictor":
        params = {"final": self.final, "best": self.best, "best_ema": self.best_ema}[which]
        return Predictor(self.model_config, self.encoding, params, self.scaler)


class Predictor:
    """Frozen parameters plus target scaling; predicts in original units."""

    def __init__(self, cfg: ModelConfig, enc: EncodingConfig, params: Mapping, scaler: TargetScaler,
                 batch_size: int = 256):
        self.cfg = cfg
        self.enc = enc
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
        self.scaler = scaler
        self.batch_size = batch_size

    def predict_prepared(self, graphs) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(graphs), self.batch_size):
                batch = GraphBatch(graphs[i:i + self.batch_size])
                out.append(forward_batch(batch, self.params, self.cfg).data)
        return self.scaler.inverse(np.concatenate(out)) if out else np.zeros(0)

    def predict(self, dags) -> np.ndarray:
        return self.predict_prepared([prepare_graph(d, self.enc, self.cfg) for d in dags])


def _val_tau(pred: np.ndarray, gt: np.ndarray) -> float:
    try:
        return kendall_tau(pred, gt)
    except (AllTied, ValueError):
        return float("nan")


def _snapshot(params) -> dict:
    return {k: t.data.copy() for k, t in params.items()}


def fit(train_records: Sequence, val_records: Sequence, model_cfg: ModelConfig,
        cfg: TrainConfig, enc: EncodingConfig,
        on_epoch: Callable[[EpochRecord], None] | None = None,
        scaler: TargetScaler | None = None) -> TrainResult:
    """Train from scratch; deterministic given ``cfg.seed``.

    Records need ``to_dag()`` and ``target``. The validation metric is
    Kendall's tau on ``val_records`` (on the train split when no
    validation records are given). Returns the final, best-validation and
    best-EMA parameter sets. ``scaler`` overrides the train-split min/max
    normalisation (useful when the split has a single distinct target).
    """
    if not train_records:
        raise EmptyDataset("training split is empty")
    train_graphs = [prepare_graph(r.to_dag(), enc, model_cfg) for r in train_records]
    y_train = np.array([r.target for r in train_records], dtype=np.float64)
    scaler = scaler or TargetScaler.fit(y_train)
    y_norm = scaler.transform(y_train)
    if val_records:
        val_graphs = [prepare_graph(r.to_dag(), enc, model_cfg) for r in val_records]
        y_val = np.array([r.target for r in val_records], dtype=np.float64)
    else:
        val_graphs, y_val = train_graphs, y_train

    params = init_params(model_cfg, cfg.seed)
    arrays = {k: t.data for k, t in params.items()}
    ema = _snapshot(params)
    state = AdamWState()
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    dropout_rng = np.random.default_rng([cfg.seed, 2])
    n = len(train_graphs)
    bs = cfg.batch_size or min(64, n)
    steps = math.ceil(n / bs)

    history: list[EpochRecord] = []
    best, best_ema = _snapshot(params), _snapshot(params)
    best_score = best_ema_score = -math.inf
    best_epoch = best_ema_epoch = None
    last_finite = None

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        total, lr = 0.0, cfg.lr_start
        for s in range(steps):
            idx = order[s * bs:(s + 1) * bs]
            batch = GraphBatch([train_graphs[i] for i in idx])
            for t in params.values():
                t.grad = None
            pred = forward_batch(batch, params, model_cfg, train=True, rng=dropout_rng)
            loss = ad.mse_loss(pred, y_norm[idx])
            if not math.isfinite(float(loss.data)):
                raise DivergedLoss(epoch, last_finite)
            ad.backward(loss)
            lr = lr_at(epoch + s / steps, cfg)
            adamw_step(arrays, {k: t.grad for k, t in params.items() if t.grad is not None},
                       state, lr, cfg)
            ema_update(ema, arrays, cfg.ema_decay)
            total += float(loss.data) * len(idx)
        train_mse = total / n
        if not math.isfinite(train_mse):
            raise DivergedLoss(epoch, last_finite)
        last_finite = epoch

        raw_pred = Predictor(model_cfg, enc, params, scaler).predict_prepared(val_graphs)
        ema_pred = Predictor(model_cfg, enc, ema, scaler).predict_prepared(val_graphs)
        score, ema_score = _val_tau(raw_pred, y_val), _val_tau(ema_pred, y_val)
        if score > best_score:
            best_score, best, best_epoch = score, _snapshot(params), epoch
        if ema_score > best_ema_score:
            best_ema_score, best_ema_epoch = ema_score, epoch
            best_ema = {k: v.copy() for k, v in ema.items()}
        rec = EpochRecord(epoch, lr, train_mse, score, ema_score)
        history.append(rec)
        log.debug("epoch %d lr %.3g train_mse %.5f val_tau %.4f ema_tau %.4f",
                  epoch, lr, train_mse, score, ema_score)
        if on_epoch is not None:
            on_epoch(rec)

    return TrainResult(model_cfg, cfg, enc, scaler, _snapshot(params), best, best_ema,
                       history, best_epoch, best_ema_epoch)


HISTORY_FIELDS = ("epoch", "lr", "train_mse", "val_metric")


def write_run_dir(result: TrainResult, out_dir, extra_config: dict | None = None) -> Path:
    """Config echo, per-epoch history CSV and the three checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = {
        "model": result.model_config.to_dict(),
        "train": result.train_config.to_dict(),
        "encoding": result.encoding.to_dict(),
        **(extra_config or {}),
    }
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True))
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for r in result.history:
            w.writerow([r.epoch, repr(r.lr), repr(r.train_mse), repr(r.val_metric)])
    meta = {"target_norm": [result.scaler.lo, result.scaler.hi]}
    for name, params in (("final", result.final), ("best", result.best),
                         ("best_ema", result.best_ema)):
        save_checkpoint(out / f"ckpt_{name}.json", params, result.model_config,
                        result.encoding, meta)
    return out
