"""Command-line driver.

::

    gpframe --config run.toml --out-dir out fit
    gpframe --out-dir out predict --input new.csv
    gpframe --out-dir out eval --split val --baselines
    gpframe --out-dir out --unlock-test eval --split test
    gpframe --out-dir out diagnose
    gpframe --seed 0 synth --n 20000 --output glacier.csv
    gpframe --config run.toml --out-dir out baseline

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  Failures print one line to stderr::

    error: exit=2 type=MissingColumn message="column 'foo' not found in data.csv"

BLAS is pinned to one thread so that results do not depend on the machine;
``--threads`` only parallelizes independent expert fits and predictions.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import config as config_mod
from . import pipeline as pl
from .data import synthesize_glacier, write_csv, write_predictions
from .errors import ConfigError, GPFrameError


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, obj, compact=False):
    text = json.dumps(_jsonable(obj), allow_nan=False,
                      **({"separators": (",", ":")} if compact else {"indent": 2}))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def _global_flags(parser, suppress):
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=default(None), help="pipeline TOML config")
    parser.add_argument("--seed", type=int, default=default(None), help="override the config seed")
    parser.add_argument("--out-dir", default=default("."), help="directory for outputs")
    parser.add_argument("--threads", type=int, default=default(1),
                        help="worker threads for expert fits and predictions")
    parser.add_argument("--unlock-test", action="store_true", default=default(False),
                        help="allow evaluation on the held-out test split")


def build_parser():
    parser = argparse.ArgumentParser(prog="gpframe", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"gpframe {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    sub.add_parser("fit", parents=[common], help="fit a model; writes model.json and train_report.json")

    p = sub.add_parser("predict", parents=[common], help="predict at the rows of a CSV")
    p.add_argument("--model", help="model document (default <out-dir>/model.json)")
    p.add_argument("--input", required=True, help="CSV with the model's feature columns")
    p.add_argument("--output", help="predictions CSV (default <out-dir>/predictions.csv)")

    p = sub.add_parser("eval", parents=[common], help="metrics report on a labelled split or CSV")
    p.add_argument("--model", action="append", help="model document; repeat to compare models")
    p.add_argument("--split", choices=("train", "val", "test"), help="default: eval.split of the config")
    p.add_argument("--data", help="labelled CSV to evaluate instead of a split")
    p.add_argument("--baselines", action="store_true", help="add k-NN and linear regression")

    p = sub.add_parser("diagnose", parents=[common], help="residuals, sample paths, gradient and self-check")
    p.add_argument("--model", help="model document (default <out-dir>/model.json)")
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--data", help="labelled CSV instead of a split")
    p.add_argument("--slice", dest="slice_feature", help="feature varied along the sample paths")

    p = sub.add_parser("synth", parents=[common], help="write the synthetic glacier data set")
    p.add_argument("--n", type=int, default=20_000)
    p.add_argument("--output", help="CSV path (default <out-dir>/synth.csv)")

    p = sub.add_parser("baseline", parents=[common], help="k-NN and linear regression under a config")
    p.add_argument("--split", choices=("train", "val", "test"), help="default: eval.split of the config")
    return parser


def _need_config(args):
    if not args.config:
        raise ConfigError(f"{args.command} needs --config")
    return config_mod.load(args.config, args.seed)


def _model_path(args, given):
    return given or os.path.join(args.out_dir, "model.json")


def cmd_fit(args):
    cfg = _need_config(args)
    doc, report = pl.fit(cfg, args.threads)
    write_json(os.path.join(args.out_dir, "model.json"), doc, compact=True)
    write_json(os.path.join(args.out_dir, "train_report.json"), report)
    print(f"fit {cfg['name']}: mode={doc['mode']} n_train={report['n_train']} "
          f"objective {report['initial_objective']:.6g} -> {report['final_objective']:.6g}")


def cmd_predict(args):
    predictor = pl.Predictor.load(_model_path(args, args.model), args.threads)
    ds = pl.read_inputs(predictor, args.input)
    pr = predictor.predict(ds.features)
    out = args.output or os.path.join(args.out_dir, "predictions.csv")
    write_predictions(out, ds.row_ids, pr.median, pr.latent_std, pr.obs_std, pr.lower95, pr.upper95)
    print(f"wrote {ds.n} predictions to {out} ({ds.n_dropped} input rows dropped)")


def _write_report(args, name, report, table):
    write_json(os.path.join(args.out_dir, f"{name}.json"), report)
    with open(os.path.join(args.out_dir, f"{name}.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")


def cmd_eval(args):
    paths = args.model or [_model_path(args, None)]
    predictors = [pl.Predictor.load(p, args.threads) for p in paths]
    cfg = predictors[0].config
    which = args.split or cfg["eval"]["split"]
    report, table = pl.evaluate(predictors, which, args.data, args.unlock_test, args.baselines)
    _write_report(args, cfg["eval"]["report"], report, table)


def cmd_baseline(args):
    cfg = _need_config(args)
    which = args.split or cfg["eval"]["split"]
    report, table = pl.evaluate([], which, None, args.unlock_test, True, baseline_cfg=cfg)
    _write_report(args, "baseline_report", report, table)


def cmd_diagnose(args):
    predictor = pl.Predictor.load(_model_path(args, args.model), args.threads)
    seed = predictor.doc["seed"] if args.seed is None else args.seed
    bundle, samples = pl.diagnose(predictor, args.split, args.data, args.unlock_test, seed,
                                  args.slice_feature)
    write_json(os.path.join(args.out_dir, "diagnostics.json"), bundle)
    cols = list(samples)
    with open(os.path.join(args.out_dir, "samples.csv"), "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for i in range(len(samples[cols[0]])):
            fh.write(",".join(repr(float(samples[c][i])) for c in cols) + "\n")
    r = bundle["residuals"]
    print(f"coverage95={r['coverage95']:.4f} std_resid={r['standardized_residual_std']:.4f} "
          f"gradient_check={'pass' if bundle['gradient_check']['passed'] else 'FAIL'} "
          f"self_check={'pass' if bundle['self_check']['passed'] else 'FAIL'}")


def cmd_synth(args):
    seed = 0 if args.seed is None else args.seed
    try:
        ds = synthesize_glacier(args.n, seed)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    out = args.output or os.path.join(args.out_dir, "synth.csv")
    write_csv(out, ds, "target", "track")
    print(f"wrote {ds.n} rows to {out}")


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "eval": cmd_eval, "diagnose": cmd_diagnose,
            "synth": cmd_synth, "baseline": cmd_baseline}


def _fail(code, kind, message):
    msg = " ".join(str(message).split())
    print(f"error: exit={code} type={kind} message={json.dumps(msg)}", file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        return _fail(2, "ConfigError", "--threads must be >= 1")
    try:
        os.makedirs(args.out_dir, exist_ok=True)
        with threadpool_limits(limits=1):
            COMMANDS[args.command](args)
    except GPFrameError as err:
        return _fail(err.exit_code, type(err).__name__, err)
    except OSError as err:
        return _fail(3, type(err).__name__, err)
    return 0


if __name__ == "__main__":
    sys.exit(main())
