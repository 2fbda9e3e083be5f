"""Command-line entry point: ``exotst <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import AttentionStore, export_attention_map
from .baselines import PersistenceModel, linear_fit_predict
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import (CorruptionSpec, DataError, load_csv, make_windows, split_and_standardize,
                      synth_generate, write_csv)
from .errors import CheckpointError, ConfigError, NumericalError
from .experiments import MASK_LEVELS, SIGMA_LEVELS, robustness, robustness_grid, robustness_table
from .model import ExoTSTConfig, WindowBatch, ablate_future, init_model, predict_batch
from .training import evaluate, metrics_from_predictions, predict_windows, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
DEFAULT_HORIZONS = (1, 7, 14, 30, 60, 90, 120)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _csv_floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _csv_ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _add_data(p):
    p.add_argument("--data", required=True, help="input CSV (first column is the timestamp)")
    p.add_argument("--target", default="y", help="endogenous column name (default: %(default)s)")


def _add_model(p):
    d = ExoTSTConfig()
    g = p.add_argument_group("model and training")
    for f in fields(ExoTSTConfig):
        if f.name == "n_exogenous":
            continue    # taken from the data
        kind = {"int": int, "float": float, "str": str}[f.type]
        flag = "--" + f.name.replace("_", "-")
        g.add_argument(flag, type=kind, default=getattr(d, f.name),
                       help=f"(default: {getattr(d, f.name)})")


def _add_checkpoint(p, required=True):
    p.add_argument("--checkpoint", required=required, default=None if required else "exotst.ckpt",
                   help="model checkpoint path" + ("" if required else " (default: %(default)s)"))


def build_parser():
    parser = _Parser(prog="exotst", description="ExoTST forecasting with past and future exogenous drivers.")
    parser.add_argument("--config", default=None, help="key=value file; command-line flags take precedence")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic driver/target CSV")
    p.add_argument("--length", type=int, default=2000, help="(default: %(default)s)")
    p.add_argument("--drivers", type=int, default=4, help="(default: %(default)s)")
    p.add_argument("--seed", type=int, default=42, help="(default: %(default)s)")
    p.add_argument("--regime", choices=("driver-dominant", "autoregressive"), default="driver-dominant",
                   help="(default: %(default)s)")
    p.add_argument("--out", default="synth.csv", help="(default: %(default)s)")

    p = sub.add_parser("train", help="train ExoTST and write a checkpoint plus report")
    _add_data(p)
    _add_model(p)
    _add_checkpoint(p, required=False)
    p.add_argument("--report", default="train_report.txt", help="(default: %(default)s)")
    p.add_argument("--k", type=int, default=50, help="first/last-k steps in test metrics (default: %(default)s)")

    p = sub.add_parser("predict", help="forecast test windows with a trained checkpoint")
    _add_data(p)
    _add_checkpoint(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="(default: %(default)s)")
    p.add_argument("--window", default="-1", help="window index, or 'all' (default: %(default)s)")
    p.add_argument("--out", default="forecast.csv", help="(default: %(default)s)")

    p = sub.add_parser("evaluate", help="test-set metrics per forecast horizon")
    _add_data(p)
    _add_checkpoint(p)
    p.add_argument("--k", type=int, default=50, help="(default: %(default)s)")
    p.add_argument("--horizons", type=_csv_ints, default=DEFAULT_HORIZONS,
                   help="comma-separated horizons, trimmed to the model horizon (default: 1,7,14,30,60,90,120)")
    p.add_argument("--destandardize", action="store_true", help="report metrics in data units")
    p.add_argument("--out", default="metrics.csv", help="(default: %(default)s)")

    p = sub.add_parser("robustness", help="re-score a checkpoint on masked/noisy drivers")
    _add_data(p)
    _add_checkpoint(p)
    p.add_argument("--mask-levels", type=_csv_floats, default=MASK_LEVELS, help="(default: 0,0.4,0.8)")
    p.add_argument("--sigma-levels", type=_csv_floats, default=SIGMA_LEVELS, help="(default: 0.8,1.2)")
    p.add_argument("--corrupt", choices=("both", "past", "future"), default="both",
                   help="which driver windows to corrupt (default: %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="corruption seed (default: %(default)s)")
    p.add_argument("--k", type=int, default=50, help="(default: %(default)s)")
    p.add_argument("--out", default="robustness.csv", help="(default: %(default)s)")

    p = sub.add_parser("export-attention", help="write attention maps of one window as CSVs")
    _add_data(p)
    _add_checkpoint(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="(default: %(default)s)")
    p.add_argument("--window", type=int, default=0, help="(default: %(default)s)")
    p.add_argument("--key", default=None, help="attention site to export (default: all)")
    p.add_argument("--head", type=int, default=None, help="head to export (default: all)")
    p.add_argument("--out-dir", default="attention", help="(default: %(default)s)")

    p = sub.add_parser("baseline", help="persistence, linear and future-ablated scores on shared splits")
    _add_data(p)
    _add_model(p)
    p.add_argument("--checkpoint", default=None, help="trained ExoTST for the ablation row (default: none)")
    p.add_argument("--k", type=int, default=50, help="(default: %(default)s)")
    p.add_argument("--out", default="baselines.csv", help="(default: %(default)s)")
    return parser


def _read_config(path):
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().lstrip("-").replace("-", "_")] = v.strip()
    return out


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown subcommand {name!r}")


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        known = {a.dest: a for a in sub._actions if a.dest != "help"}
        defaults = {}
        for k, v in _read_config(args.config).items():
            if k not in known:
                raise UsageError(f"config key {k!r} is not a flag of '{args.command}'")
            a = known[k]
            if a.type is not None:
                v = a.type(v)
            elif isinstance(a, argparse._StoreTrueAction):
                v = v.lower() in ("1", "true", "yes")
            defaults[k] = v
        sub.set_defaults(**defaults)
        for a in sub._actions:
            if a.dest in defaults:
                a.required = False
        args = parser.parse_args(argv)
    return args


def _model_config(args, n_exogenous):
    kw = {f.name: getattr(args, f.name) for f in fields(ExoTSTConfig) if f.name != "n_exogenous"}
    return ExoTSTConfig(n_exogenous=n_exogenous, **kw).validate()


def _windows(series, cfg):
    splits = split_and_standardize(series, cfg.lookback, cfg.horizon)
    L, f = cfg.lookback, cfg.horizon
    return (splits, make_windows(splits.train, L, f, 1), make_windows(splits.val, L, f, f),
            make_windows(splits.test, L, f, f))


def _load(args):
    model = load_checkpoint(args.checkpoint)
    series = load_csv(args.data, args.target)
    if series.n_drivers != model.cfg.n_exogenous:
        raise DataError(f"data has {series.n_drivers} drivers, checkpoint expects {model.cfg.n_exogenous}")
    return model, series


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v))


def cmd_synth(args):
    write_csv(synth_generate(args.length, args.drivers, args.seed, regime=args.regime), args.out)
    print(f"wrote {args.out}")


def cmd_train(args):
    series = load_csv(args.data, args.target)
    cfg = _model_config(args, series.n_drivers)
    _, tr, va, te = _windows(series, cfg)
    model = init_model(cfg)
    report = train(model, tr, va, cfg, checkpoint_path=args.checkpoint, save_fn=save_checkpoint)
    save_checkpoint(model, args.checkpoint)
    report.test_metrics = evaluate(model, te, k=min(args.k, len(te) * cfg.horizon))
    report.write(args.report)
    print(f"best epoch {report.best_epoch} val {report.best_val_loss:.6f} "
          f"test mse {report.test_metrics.mse:.6f}; wrote {args.checkpoint}, {args.report}")


def _split_windows(model, series, split):
    splits, tr, va, te = _windows(series, model.cfg)
    return splits, {"train": tr, "val": va, "test": te}[split]


def cmd_predict(args):
    model, series = _load(args)
    _, windows = _split_windows(model, series, args.split)
    if not windows:
        raise DataError(f"{args.split} split holds no complete window")
    if args.window == "all":
        chosen = list(range(len(windows)))
    else:
        try:
            i = int(args.window)
            chosen = [range(len(windows))[i]]
        except (ValueError, IndexError):
            raise UsageError(f"--window must be 'all' or an index below {len(windows)}, got {args.window!r}")
    batch = WindowBatch.stack([windows[i] for i in chosen])
    with nx.no_grad():
        y_hat, y_std, _, _ = predict_batch(model, batch, training=False)
    rows = []
    for r, i in enumerate(chosen):
        for step in range(model.cfg.horizon):
            row = [step + 1, _fmt(y_hat.data[r, step]), _fmt(y_std.data[r, step])]
            rows.append(([i] + row) if args.window == "all" else row)
    header = ["step", "y_hat", "y_hat_std"]
    _write_rows(args.out, (["window"] + header) if args.window == "all" else header, rows)
    print(f"wrote {args.out}")


def cmd_evaluate(args):
    model, series = _load(args)
    splits, windows = _split_windows(model, series, "test")
    if not windows:
        raise DataError("test split holds no complete window")
    pred = predict_windows(model, windows)
    target = np.stack([w.y_future for w in windows])
    if args.destandardize:
        pred, target = splits.stats.destandardize(pred), splits.stats.destandardize(target)
    f = model.cfg.horizon
    horizons = sorted({h for h in args.horizons if 1 <= h <= f} | {f})
    rows = []
    for h in horizons:
        k = min(args.k, len(windows) * h)
        m = metrics_from_predictions(pred[:, :h], target[:, :h], k)
        rows.append([h, _fmt(m.mse), _fmt(m.mae), k, _fmt(m.mse_first_k), _fmt(m.mse_last_k)])
    _write_rows(args.out, ["horizon", "mse", "mae", "k", "mse_first_k", "mse_last_k"], rows)
    print(f"wrote {args.out}")


def cmd_robustness(args):
    model, series = _load(args)
    _, windows = _split_windows(model, series, "test")
    if not windows:
        raise DataError("test split holds no complete window")
    k = min(args.k, len(windows) * model.cfg.horizon)
    rows = robustness(model, windows, seed=args.seed, k=k,
                      grid=robustness_grid(args.mask_levels, args.sigma_levels),
                      past=args.corrupt in ("both", "past"), future=args.corrupt in ("both", "future"))
    Path(args.out).write_text(robustness_table(rows), encoding="utf-8")
    print(f"wrote {args.out} ({len(rows)} rows)")


def cmd_export_attention(args):
    model, series = _load(args)
    _, windows = _split_windows(model, series, args.split)
    if not 0 <= args.window < len(windows):
        raise UsageError(f"--window must be in [0, {len(windows)}), got {args.window}")
    store = AttentionStore()
    with nx.no_grad():
        predict_batch(model, WindowBatch.stack([windows[args.window]]), training=False, store=store)
    keys = [args.key] if args.key else store.keys()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for key in keys:
        if key not in store:
            raise UsageError(f"unknown attention key {key!r}; available: {', '.join(store.keys())}")
        heads = store.maps[key].shape[-3]
        for h in ([args.head] if args.head is not None else range(heads)):
            export_attention_map(store, key, h, out / f"{key}.head{h}.csv")
            n += 1
    print(f"wrote {n} attention maps to {out}")


def cmd_baseline(args):
    series = load_csv(args.data, args.target)
    cfg = _model_config(args, series.n_drivers)
    _, tr, va, te = _windows(series, cfg)
    if not te:
        raise DataError("test split holds no complete window")
    k = min(args.k, len(te) * cfg.horizon)
    results = [("persistence", evaluate(PersistenceModel(cfg.horizon), te, k=k)),
               ("linear", linear_fit_predict(tr, va, te, cfg, k=k)[0])]
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint, expected=cfg)
        results.append(("exotst", evaluate(model, te, k=k)))
        results.append(("exotst_past_only", evaluate(ablate_future(model), te, k=k)))
    _write_rows(args.out, ["model", "mse", "mae", "mse_first_k", "mse_last_k"],
                [[name, _fmt(m.mse), _fmt(m.mae), _fmt(m.mse_first_k), _fmt(m.mse_last_k)]
                 for name, m in results])
    print(f"wrote {args.out}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "robustness": cmd_robustness, "export-attention": cmd_export_attention,
            "baseline": cmd_baseline}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        # non-finite values are caught by the tensor ops and reported as NumericalError
        with np.errstate(over="ignore", invalid="ignore"):
            COMMANDS[args.command](args)
    except SystemExit as exc:        # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main():
    sys.exit(run())
