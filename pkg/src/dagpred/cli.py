"""``dagpred`` command line: gen-data, train, eval, ablate, grad-check.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .config import PRESETS, dump_json, load_run_config
from .datasets import SynthConfig, generate_synthetic, load_jsonl, save_jsonl, split
from .errors import (
    CheckpointMismatch,
    ConfigError,
    DagpredError,
    DivergedLoss,
    EmptyInput,
    NonDeterministicFunction,
    ParseError,
    ValidationError,
)
from .metrics import evaluate
from .model import load_checkpoint
from .train import Predictor, TargetScaler, fit, write_run_dir

log = logging.getLogger("dagpred")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad flags or inputs that exist but are unusable; maps to exit code 2."""


def _err(msg: str) -> None:
    print(f"dagpred: {msg}", file=sys.stderr)


def _load_data(path):
    if path is None:
        raise UsageError("--data is required")
    if not Path(path).is_file():
        raise UsageError(f"data file not found: {path}")
    try:
        records = load_jsonl(path)
    except (ParseError, ValidationError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    if not records:
        raise UsageError(f"{path}: no records")
    return records


# --- gen-data -------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    try:
        cfg = SynthConfig(n_graphs=args.n, depth_min=args.depth_min, depth_max=args.depth_max,
                          width_min=args.width_min, width_max=args.width_max,
                          extra_edge_prob=args.extra_edge_prob, parallel_discount=args.beta,
                          seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_jsonl(generate_synthetic(cfg), args.out)
    print(f"wrote {args.n} records to {args.out}")
    return EXIT_OK


# --- train ----------------------------------------------------------------------

def _run_config(args):
    return load_run_config(args.config, args.set or (), preset=args.preset, seed=args.seed,
                           data_path=args.data, out_dir=getattr(args, "out", None),
                           mask_variant=getattr(args, "mask_variant", None),
                           ffn_variant=getattr(args, "ffn_variant", None))


def cmd_train(args) -> int:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    cfg = _run_config(args)
    records = _load_data(cfg.data_path)
    try:
        train_recs, val_recs, test_recs = split(records, cfg.data.fractions, cfg.split_seed)
    except (EmptyInput, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if not train_recs:
        raise UsageError("training split is empty")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(dump_json(cfg))

    def progress(rec):
        log.info("epoch %d lr %.3g train_mse %.5f val_tau %.4f",
                 rec.epoch, rec.lr, rec.train_mse, rec.val_metric)

    try:
        result = fit(train_recs, val_recs, cfg.model, cfg.train, cfg.encoding, on_epoch=progress)
    except DivergedLoss as exc:
        _err(f"training diverged at epoch {exc.epoch}; last finite epoch: {exc.last_finite_epoch}")
        return EXIT_RUNTIME
    write_run_dir(result, out, {"run": cfg.to_dict()})
    for name, recs in (("train", train_recs), ("val", val_recs), ("test", test_recs)):
        save_jsonl(recs, out / f"{name}.jsonl")
    final = result.history[-1].val_metric if result.history else float("nan")
    metrics = {
        "final_val_kendall_tau": final,
        "val_split": "val.jsonl" if val_recs else "train.jsonl",
        "checkpoint": "ckpt_final.json",
        "best_epoch": result.best_epoch,
        "best_ema_epoch": result.best_ema_epoch,
    }
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    print(f"final val kendall_tau {final:.6f}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------------

def cmd_eval(args) -> int:
    if not Path(args.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    ckpt = load_checkpoint(args.ckpt)  # CheckpointMismatch -> exit 1
    records = _load_data(args.data)
    norm = ckpt.meta.get("target_norm")
    if not (isinstance(norm, list) and len(norm) == 2):
        raise CheckpointMismatch("checkpoint has no target_norm metadata")
    scaler = TargetScaler(float(norm[0]), float(norm[1]))
    pred = Predictor(ckpt.model_config, ckpt.encoding, ckpt.params, scaler).predict(
        [r.to_dag() for r in records])
    gt = np.array([r.target for r in records])
    metrics = args.metric or ["kt", "mape", "acc"]
    deltas = args.delta or [0.1]
    report = evaluate(pred, gt, metrics=tuple(metrics), deltas=tuple(deltas))
    print(report.to_json())
    return EXIT_OK


# --- ablate ---------------------------------------------------------------------

def cmd_ablate(args) -> int:
    if not Path(args.grid).is_file():
        raise UsageError(f"grid file not found: {args.grid}")
    cells = ablation.read_grid(args.grid)
    cfg = _run_config(args)
    records = _load_data(cfg.data_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(dump_json(cfg))
    results = ablation.run_ablation(records, cells, cfg.model, cfg.train, cfg.encoding,
                                    cfg.data.fractions, cfg.split_seed, workers=args.workers)
    path = ablation.write_csv(results, out / "ablation.csv")
    failed = sum(r.status != "ok" for r in results)
    print(f"wrote {len(results)} rows to {path}" + (f" ({failed} failed)" if failed else ""))
    return EXIT_OK


# --- grad-check -----------------------------------------------------------------

def cmd_grad_check(args) -> int:
    from .selfcheck import grad_check_model

    try:
        rep = grad_check_model(args.preset, args.seed, dropout_on=args.dropout_on,
                               h=args.h, tol=args.tol,
                               max_per_param=None if args.all else args.max_per_param)
    except NonDeterministicFunction as exc:
        _err(f"NonDeterministicFunction: {exc}")
        return EXIT_RUNTIME
    status = "PASS" if rep.passed else "FAIL"
    print(f"{status} max_rel_error={rep.max_rel_error!r} worst_param={rep.worst_param} "
          f"index={tuple(int(i) for i in rep.worst_index)} checked={rep.n_checked}")
    if not rep.passed:
        _err(f"gradient mismatch in {rep.worst_param}")
        return EXIT_RUNTIME
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON run configuration")
    p.add_argument("--data", help="JSONL dataset (.gz accepted)")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-key override, e.g. model.channels=32 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dagpred", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic JSONL benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--depth-min", type=int, default=3)
    g.add_argument("--depth-max", type=int, default=12)
    g.add_argument("--width-min", type=int, default=1)
    g.add_argument("--width-max", type=int, default=4)
    g.add_argument("--extra-edge-prob", type=float, default=0.1)
    g.add_argument("--beta", type=float, default=0.2, help="parallel-branch discount")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a predictor and write a run directory")
    _config_flags(t)
    t.add_argument("--out", required=True)
    t.add_argument("--mask-variant")
    t.add_argument("--ffn-variant")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a JSONL dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metric", action="append", choices=("kt", "mape", "acc"))
    e.add_argument("--delta", action="append", type=float)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train every (mask, ffn, seed) cell of a grid")
    _config_flags(a)
    a.add_argument("--grid", required=True, help="CSV of mask_variant,ffn_variant,seed")
    a.add_argument("--out", required=True)
    a.add_argument("--workers", type=int, default=1, help="parallel processes (0: one per CPU)")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("grad-check", help="finite-difference check of the full model")
    c.add_argument("--preset", choices=PRESETS, default="accuracy")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--dropout-on", action="store_true")
    c.add_argument("--h", type=float, default=1e-5)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--max-per-param", type=int, default=64)
    c.add_argument("--all", action="store_true", help="probe every coordinate")
    c.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) == 0:
        args.workers = None
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except CheckpointMismatch as exc:
        _err(f"CheckpointMismatch: {exc}")
        return EXIT_RUNTIME
    except (DagpredError, OSError, ValueError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
