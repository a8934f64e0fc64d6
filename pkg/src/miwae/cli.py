"""Command line pipeline: corrupt -> train -> impute -> evaluate, plus loglik.

Every subcommand writes ``<output>.manifest.json`` recording the resolved
flags and timings. Exit status is 0 on success, 2 for input errors and 3 when
a numerical abort stops the run.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .autodiff import NonFiniteError
from ._random import substream
from .bounds import TrainConfig, loglik_rows, train
from .data import (DataError, MaskedMatrix, Standardizer, corrupt_mcar, impute_knn,
                   impute_mean, imputation_mse, load_csv, load_mask_csv, write_csv,
                   write_mask_csv)
from .imputation import impute_rows, multiple_impute_rows
from .model import DlvmModel, load_checkpoint, save_checkpoint

logger = logging.getLogger("miwae")

EXIT_INPUT = 2
EXIT_NUMERIC = 3


def _strip_ext(path):
    return os.path.splitext(str(path))[0]


def _write_manifest(path, args, started, extra=None):
    manifest = {
        "subcommand": args.command,
        "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")},
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    with open(path + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_masked(data_path, mask_path):
    data = load_csv(data_path)
    if mask_path:
        mask = load_mask_csv(mask_path)
        if mask.shape != data.shape:
            raise DataError(f"mask shape {mask.shape} != data shape {data.shape}")
        data = MaskedMatrix(data.values, data.mask | mask, data.columns)
    return data


def cmd_corrupt(args):
    started = time.perf_counter()
    data = load_csv(args.input, drop_columns=args.drop_columns)
    corrupted, truth = corrupt_mcar(data, args.rate, substream(args.seed, "corrupt"))
    prefix = args.out_prefix
    write_csv(prefix + ".csv", corrupted.values, corrupted.columns, mask=corrupted.mask)
    write_mask_csv(prefix + ".mask.csv", corrupted.mask, corrupted.columns)
    write_csv(prefix + ".truth.csv", truth, corrupted.columns)
    logger.info("missing fraction %.4f", corrupted.missing_rate())
    _write_manifest(prefix, args, started, {"missing_fraction": corrupted.missing_rate()})


def _parse_hidden(text):
    text = str(text).strip()
    return tuple(int(h) for h in text.split(",") if h.strip()) if text else ()


def cmd_train(args):
    started = time.perf_counter()
    data = _load_masked(args.data, args.mask)
    X = data.values
    standardizer = None
    if not args.no_standardize:
        standardizer = Standardizer().fit(X, data.mask)
        X = standardizer.transform(X)
    model = DlvmModel(data.shape[1], args.latent_dim, _parse_hidden(args.hidden),
                      args.obs_family, args.var_family, args.obs_variance_floor,
                      seed=substream(args.seed, "init"))
    config = TrainConfig(K=args.k, batch_size=args.batch_size, steps=args.steps,
                         learning_rate=args.learning_rate, seed=args.seed,
                         estimator=args.estimator, log_every=args.log_every)
    metrics_path = args.metrics_out or _strip_ext(args.checkpoint_out) + ".metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "objective", "bound", "wall_time"])

        def emit(step, objective, value, wall):
            writer.writerow([step, objective, f"{value:.17g}", f"{wall:.3f}"])
            fh.flush()

        history = train(model, X, data.mask, config, metrics=emit)
    extra = {"columns": data.columns,
             "standardizer": standardizer.to_dict() if standardizer else None}
    save_checkpoint(args.checkpoint_out, model, config.to_dict(), extra)
    _write_manifest(_strip_ext(args.checkpoint_out), args, started,
                    {"objective": config.objective,
                     "final_bound": history[-1][1] if history else None})


def _model_and_data(args):
    model, header = load_checkpoint(args.checkpoint)
    data = _load_masked(args.data, args.mask)
    if data.shape[1] != model.n_features:
        raise DataError(f"data has {data.shape[1]} columns, checkpoint expects {model.n_features}")
    std = (header.get("extra") or {}).get("standardizer")
    standardizer = Standardizer.from_dict(std) if std else None
    X = standardizer.transform(data.values) if standardizer else data.values
    return model, data, X, standardizer


def cmd_impute(args):
    started = time.perf_counter()
    model, data, X, standardizer = _model_and_data(args)
    unscale = standardizer.inverse_transform if standardizer else (lambda a: a)
    prefix = _strip_ext(args.out)
    if args.multiple:
        sets, ess = multiple_impute_rows(model, X, data.mask, args.l, args.multiple,
                                         args.seed, args.min_ratio)
        outputs = []
        for k, s in enumerate(sets, start=1):
            path = f"{prefix}_imp{k}.csv"
            write_csv(path, np.where(data.missing, unscale(s), data.values), data.columns)
            outputs.append(path)
    else:
        filled, ess = impute_rows(model, X, data.mask, args.l, args.seed)
        write_csv(prefix + ".csv", np.where(data.missing, unscale(filled), data.values),
                  data.columns)
        outputs = [prefix + ".csv"]
    with open(prefix + ".diagnostics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "n_missing", "L", "ess"])
        for i, e in enumerate(ess):
            w.writerow([i, int(data.mask[i].sum()), args.l, f"{e:.17g}"])
    _write_manifest(prefix, args, started, {"outputs": outputs})


def cmd_baseline(args):
    started = time.perf_counter()
    data = _load_masked(args.data, args.mask)
    if args.method == "mean":
        filled = impute_mean(data)
    else:
        filled = impute_knn(data, range(args.k_min, args.k_max + 1), args.folds,
                            substream(args.seed, "knn"))
    write_csv(args.out, filled, data.columns)
    _write_manifest(_strip_ext(args.out), args, started)


def cmd_evaluate(args):
    started = time.perf_counter()
    truth = load_csv(args.truth)
    mask = load_mask_csv(args.mask).astype(bool)
    if mask.shape != truth.shape:
        raise DataError("truth and mask shapes differ")
    # scale with observed-entry statistics so MSE is in standardized units
    scaler = Standardizer().fit(truth.values, mask)
    t = scaler.transform(truth.values)
    rows = []
    for k, path in enumerate(args.imputed, start=1):
        imp = load_csv(path)
        if imp.shape != truth.shape or imp.mask.any():
            raise DataError(f"{path}: expected a complete {truth.shape} matrix")
        mse = imputation_mse(scaler.transform(imp.values), t, mask)
        method = args.method if len(args.imputed) == 1 else f"{args.method}_imp{k}"
        rows.append([args.dataset, method, args.seed, mse])
    if len(rows) > 1:
        rows.append([args.dataset, f"{args.method}_pooled", args.seed,
                     float(np.mean([r[3] for r in rows]))])
    out = args.out
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset", "method", "seed", "mse"])
        for r in rows:
            w.writerow([*r[:3], f"{r[3]:.17g}"])
    for r in rows:
        print(f"{r[0]},{r[1]},{r[2]},{r[3]:.6f}")
    _write_manifest(_strip_ext(out), args, started)


def cmd_loglik(args):
    started = time.perf_counter()
    model, data, X, standardizer = _model_and_data(args)
    ll = loglik_rows(model, X, data.mask, args.l, args.seed)
    if standardizer is not None:
        ll = ll - (~data.missing) @ np.log(standardizer.scale_)
    mean = float(ll.mean())
    se = float(ll.std(ddof=1) / math.sqrt(len(ll))) if len(ll) > 1 else float("nan")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "loglik"])
        for i, v in enumerate(ll):
            w.writerow([i, f"{v:.17g}"])
    print(f"mean log-likelihood {mean:.6f} (se {se:.6f}, L={args.l})")
    _write_manifest(_strip_ext(args.out), args, started, {"mean": mean, "se": se})


def build_parser():
    parser = argparse.ArgumentParser(prog="miwae", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file overriding flag defaults")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("corrupt", help="hide entries completely at random")
    p.add_argument("input")
    p.add_argument("out_prefix")
    p.add_argument("--rate", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--drop-columns", nargs="*", default=[],
                   help="columns (e.g. class labels) removed before corruption")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="fit a model by maximising the bound")
    p.add_argument("data")
    p.add_argument("mask", nargs="?")
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--latent-dim", type=int, default=10)
    p.add_argument("--hidden", default="128,128,128")
    p.add_argument("--obs-family", default="studentt", choices=["studentt", "gaussian", "bernoulli"])
    p.add_argument("--var-family", default="studentt", choices=["studentt", "gaussian"])
    p.add_argument("--obs-variance-floor", type=float, default=0.01)
    p.add_argument("--estimator", default="standard", choices=["standard", "pathwise"])
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--no-standardize", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--metrics-out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="single or multiple imputation")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("mask", nargs="?")
    p.add_argument("--l", type=int, default=10_000)
    p.add_argument("--multiple", type=int, default=0, metavar="M")
    p.add_argument("--min-ratio", type=float, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("baseline", help="mean or kNN imputation")
    p.add_argument("data")
    p.add_argument("mask", nargs="?")
    p.add_argument("--method", default="mean", choices=["mean", "knn"])
    p.add_argument("--k-min", type=int, default=5)
    p.add_argument("--k-max", type=int, default=15)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="imputation MSE in standardized units")
    p.add_argument("imputed", nargs="+")
    p.add_argument("--truth", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--dataset", default="data")
    p.add_argument("--method", default="miwae")
    p.add_argument("--seed", default="0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("loglik", help="importance-sampling log-likelihood estimates")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("mask", nargs="?")
    p.add_argument("--l", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_loglik)
    return parser


def read_config(path):
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.lstrip("-").replace("-", "_")] = value
    return values


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        overrides = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in subparser._actions}
        unknown = sorted(set(overrides) - set(known))
        if unknown:
            raise DataError(f"unknown config keys for '{args.command}': {unknown}")
        defaults = {}
        for key, raw in overrides.items():
            action = known[key]
            if action.const is True:  # store_true flag
                defaults[key] = raw.lower() in ("1", "true", "yes")
            else:
                defaults[key] = action.type(raw) if action.type else raw
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv=None):
    try:
        args = parse_args(argv)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NonFiniteError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
