"""Command-line orchestration: corrupt -> train -> impute/predict -> report.

Commands: impute, predict, ablate, gradcheck. Exit codes: 2 config error,
3 data error, 4 numeric failure (gradcheck failures exit 1).
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import __version__
from .checks import run_gradient_suite
from .data import (MaskSet, TabularDataset, compose_masks, generate_mcar_mask,
                   load_csv, load_schema, raw_column, split_train_test, write_csv)
from .errors import ConfigError, DataError, NumericError
from .heads import assemble_imputed, finalize_output, predict_label_logit
from .metrics import auprc, mean_imputation_error, per_feature_errors
from .model import VARIANTS, ModelConfig, model_forward
from .rng import substream
from .tensor import stop_taping
from .training import (MODES, TrainConfig, TrainResult, save_checkpoint,
                       train_imputation, train_predict)

VALID_MASK_RATE = 0.1


def _derived_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**31 - 1))


def build_masks(n: int, k: int, rate: float, seed: int) -> MaskSet:
    M_test = generate_mcar_mask(n, k, rate, _derived_seed(seed, "testmask"))
    M_valid = generate_mcar_mask(n, k, VALID_MASK_RATE, _derived_seed(seed, "validmask"))
    return MaskSet(M_test=M_test, M_valid=M_valid, rate_test=rate,
                   rate_valid=VALID_MASK_RATE)


def _resolved_config(args, mcfg: ModelConfig, tcfg: TrainConfig) -> dict:
    cfg = {
        "command": args.command,
        "data": args.data,
        "schema": args.schema,
        "missing_rate": args.missing_rate,
        "seed": args.seed,
        "variant": mcfg.variant,
        "epsilon": mcfg.epsilon,
        "mode": tcfg.mode,
        "epochs": tcfg.resolved().epochs,
        "batch_size": tcfg.resolved().batch_size,
        "train_mask_rate": tcfg.train_mask_rate,
        "folds": tcfg.folds,
        "patience": tcfg.patience,
        "learning_rate": tcfg.lr,
        "weight_learning_rate": tcfg.lr_weight,
    }
    return cfg


def _write_report(path: str | None, report: dict):
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _completed_columns(params, ds: TabularDataset, M_obs: np.ndarray, mcfg: ModelConfig):
    with stop_taping():
        fwd = model_forward(params, ds.X, M_obs, ds.schema, mcfg)
    return finalize_output(fwd.preds, ds, M_obs), fwd


def _truth_columns(ds: TabularDataset) -> list[list]:
    return [list(raw_column(ds, j)) for j in range(ds.k)]


def run_impute(ds: TabularDataset, masks: MaskSet, mcfg: ModelConfig,
               tcfg: TrainConfig, base_config: dict) -> tuple[dict, TrainResult, list]:
    t0 = time.perf_counter()
    result = train_imputation(ds, masks, mcfg, tcfg)
    M_obs = compose_masks(ds.M, masks.M_test)
    completed, fwd = _completed_columns(result.params, ds, M_obs, mcfg)
    eval_mask = ds.M * (1.0 - masks.M_test)  # hidden by the test mask, truth known
    per_feature = per_feature_errors(ds, _truth_columns(ds), completed, eval_mask)
    report = {
        "version": __version__,
        "config": base_config,
        "seed": tcfg.seed,
        "per_feature": per_feature,
        "mean_imputation_error": mean_imputation_error(per_feature),
        "auprc": None,
        "no_evaluated_entries": all(p.get("error") is None for p in per_feature),
        "best_epoch": result.history.get("best_epoch"),
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
    }
    if fwd.graph is not None:
        report["graph"] = {"size": fwd.graph.size, "nnz": int(fwd.graph.nnz),
                           "epsilon": fwd.graph.epsilon}
    return report, result, completed


def run_predict(ds: TabularDataset, masks: MaskSet, valid_idx: np.ndarray,
                mcfg: ModelConfig, tcfg: TrainConfig,
                base_config: dict) -> tuple[dict, TrainResult, list]:
    t0 = time.perf_counter()
    result = train_predict(ds, masks, valid_idx, mcfg, tcfg)
    M_obs = compose_masks(ds.M, masks.M_test)
    completed, fwd = _completed_columns(result.params, ds, M_obs, mcfg)
    with stop_taping():
        X_hat = assemble_imputed(fwd.preds, ds.schema)
        logit = predict_label_logit(X_hat, result.params)
    test_rows = np.flatnonzero(ds.V == 0.0)
    scores = logit.data.reshape(-1)[test_rows]
    labels = ds.Y[test_rows]
    test_auprc = auprc(scores, labels) if 0 < labels.sum() else None
    eval_mask = ds.M * (1.0 - masks.M_test)
    per_feature = per_feature_errors(ds, _truth_columns(ds), completed, eval_mask)
    report = {
        "version": __version__,
        "config": base_config,
        "seed": tcfg.seed,
        "per_feature": per_feature,
        "mean_imputation_error": mean_imputation_error(per_feature),
        "auprc": test_auprc,
        "best_epoch": result.history.get("best_epoch"),
        "final_train_target_loss": (result.history.get("target_loss") or [None])[-1],
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
    }
    if tcfg.mode == "meta":
        report["task_weights"] = result.history.get("task_weights")
    if fwd.graph is not None:
        report["graph"] = {"size": fwd.graph.size, "nnz": int(fwd.graph.nnz),
                           "epsilon": fwd.graph.epsilon}
    return report, result, completed


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_impute(args) -> int:
    specs, _ = load_schema(args.schema)
    ds = load_csv(args.data, specs)
    masks = build_masks(ds.n, ds.k, args.missing_rate, args.seed)
    mcfg = ModelConfig(variant=args.variant, epsilon=args.epsilon)
    tcfg = TrainConfig(mode="impute", epochs=args.epochs, batch_size=args.batch_size,
                       seed=args.seed)
    report, result, completed = run_impute(ds, masks, mcfg, tcfg,
                                           _resolved_config(args, mcfg, tcfg))
    if args.out:
        write_csv(args.out, ds.schema, completed)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, result.params)
    _write_report(args.report, report)
    return 0


def cmd_predict(args) -> int:
    specs, target = load_schema(args.schema)
    if target is None:
        raise ConfigError("predict requires a schema with a target column")
    ds = load_csv(args.data, specs, target=target)
    if ds.Y is None:
        raise DataError("no labels found for target column")
    ds.V, valid_idx = split_train_test(ds.n, 0.7, 0.2, _derived_seed(args.seed, "split"))
    masks = build_masks(ds.n, ds.k, args.missing_rate, args.seed)
    mcfg = ModelConfig(variant=args.variant, epsilon=args.epsilon)
    tcfg = TrainConfig(mode=args.mode, epochs=args.epochs, batch_size=args.batch_size,
                       seed=args.seed, pin_weights=args.pin_weights)
    report, result, completed = run_predict(ds, masks, valid_idx, mcfg, tcfg,
                                            _resolved_config(args, mcfg, tcfg))
    if args.out:
        write_csv(args.out, ds.schema, completed)
    if args.checkpoint:
        save_checkpoint(args.checkpoint, result.params)
    _write_report(args.report, report)
    return 0


def cmd_ablate(args) -> int:
    specs, target = load_schema(args.schema)
    variants = args.variants.split(",")
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    modes = args.modes.split(",") if args.modes else ["impute"]
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown mode {m!r}")
    cells = []
    for variant in variants:
        for mode in modes:
            sub = argparse.Namespace(**vars(args))
            sub.variant = variant
            sub.mode = mode
            mcfg = ModelConfig(variant=variant, epsilon=args.epsilon)
            tcfg = TrainConfig(mode=mode, epochs=args.epochs, batch_size=args.batch_size,
                               seed=args.seed)
            if mode == "impute":
                ds = load_csv(args.data, [ColumnSpecCopy(c) for c in specs])
                masks = build_masks(ds.n, ds.k, args.missing_rate, args.seed)
                report, _, _ = run_impute(ds, masks, mcfg, tcfg,
                                          _resolved_config(sub, mcfg, tcfg))
            else:
                if target is None:
                    raise ConfigError("prediction cells require a schema target")
                ds = load_csv(args.data, [ColumnSpecCopy(c) for c in specs], target=target)
                ds.V, valid_idx = split_train_test(ds.n, 0.7, 0.2,
                                                   _derived_seed(args.seed, "split"))
                masks = build_masks(ds.n, ds.k, args.missing_rate, args.seed)
                report, _, _ = run_predict(ds, masks, valid_idx, mcfg, tcfg,
                                           _resolved_config(sub, mcfg, tcfg))
            cells.append({"variant": variant, "mode": mode, "report": report})
    _write_report(args.report, {"version": __version__, "cells": cells})
    return 0


def ColumnSpecCopy(c):
    from .data import ColumnSpec
    return ColumnSpec(name=c.name, kind=c.kind,
                      categories=list(c.categories) if c.categories else None)


def cmd_gradcheck(args) -> int:
    suite = run_gradient_suite(seeds=(args.seed, args.seed + 1, args.seed + 2),
                               forced_bug=args.forced_bug)
    _write_report(args.report, suite)
    return 0 if suite["passed"] else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gedi",
                                     description="Graph-based end-to-end tabular "
                                                 "imputation and label prediction")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_mode=False):
        p.add_argument("--data", required=True, help="input CSV path")
        p.add_argument("--schema", required=True, help="schema JSON path")
        p.add_argument("--missing-rate", type=float, default=0.3, dest="missing_rate")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
        p.add_argument("--epsilon", type=float, default=0.8)
        p.add_argument("--out", default=None, help="completed-matrix CSV path")
        p.add_argument("--report", default=None, help="report JSON path (default stdout)")
        p.add_argument("--checkpoint", default=None, help="checkpoint output path")
        if with_mode:
            p.add_argument("--mode", default="meta", choices=[m for m in MODES if m != "impute"])
            p.add_argument("--pin-weights", action="store_true", dest="pin_weights",
                           help="force all task weights to exactly 1")

    p_imp = sub.add_parser("impute", help="train an imputer and complete the matrix")
    common(p_imp)
    p_imp.add_argument("--variant", default="gedi", choices=list(VARIANTS))

    p_pred = sub.add_parser("predict", help="train for downstream label prediction")
    common(p_pred, with_mode=True)
    p_pred.add_argument("--variant", default="gedi", choices=list(VARIANTS))

    p_abl = sub.add_parser("ablate", help="run a variant x mode grid")
    common(p_abl)
    p_abl.add_argument("--variants", default=",".join(VARIANTS))
    p_abl.add_argument("--modes", default=None,
                       help="comma list of prediction modes; default impute-only")

    p_gc = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--report", default=None)
    p_gc.add_argument("--forced-bug", action="store_true", dest="forced_bug",
                      help="inject a broken derivative (CI self-test)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"impute": cmd_impute, "predict": cmd_predict,
                "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}
    try:
        return handlers[args.command](args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
