"""``ltnseg`` command line: generate | train | evaluate | gradcheck | report."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from ltnseg.config import ConfigError, RunConfig, load_run_config
from ltnseg.data import generate_dataset, kfold_split, read_dataset, stack_samples, write_dataset
from ltnseg.evaluation import constraint_report, emit_report, format_table, predict_labels, read_report
from ltnseg.gradsuite import format_rows, run_suite
from ltnseg.model import load_checkpoint
from ltnseg.trainer import fit

log = logging.getLogger("ltnseg")


class UsageError(Exception):
    pass


def _add_config_flags(parser):
    parser.add_argument("--config", help="key = value file; flags override its entries")
    for f in fields(RunConfig):
        parser.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar="V")


def _resolve(args):
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return load_run_config(args.config, overrides)


def _echo(cfg, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(cfg.to_text())


def _require(cfg, *names):
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n for n in missing))


def cmd_generate(cfg):
    _require(cfg, "out")
    samples = generate_dataset(cfg.n, cfg.phantom_config(), seed=cfg.seed)
    write_dataset(samples, cfg.out)
    print(f"wrote {len(samples)} samples to {cfg.out}")
    return 0


def cmd_train(cfg):
    _require(cfg, "data", "out")
    samples = read_dataset(cfg.data)
    plan = kfold_split(len(samples), cfg.k, cfg.seed)
    text = cfg.to_text()
    _echo(cfg, Path(cfg.out) / cfg.mode / f"fraction_{cfg.fraction:g}")
    results = fit(samples, plan, cfg.fraction, cfg.train_config(), cfg.out, text)
    for res in results:
        print(f"{cfg.mode} fraction={cfg.fraction:g} fold={res.fold} val_dice={res.final_val_dice:.4f}")
    print(f"mean val_dice={np.mean([r.final_val_dice for r in results]):.4f}")
    return 0


def _fold_predictions(run_dir, mode, fraction, plan, images):
    """Out-of-fold argmax predictions: every sample scored by the model that never trained on it."""
    preds = np.zeros(images.shape, dtype=np.int64)
    base = Path(run_dir) / mode / f"fraction_{fraction:g}"
    for fold in range(plan.k):
        ckpt = base / f"fold_{fold}" / "model.ckpt"
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        val = plan.val_ids(fold)
        preds[val] = predict_labels(load_checkpoint(ckpt), images[val])
    return preds


def cmd_evaluate(cfg, fmt):
    _require(cfg, "data", "out")
    samples = read_dataset(cfg.data)
    images, labels, sids = stack_samples(samples)
    run_dir = Path(cfg.out)
    modes = [m for m in ("baseline", "ltn") if (run_dir / m / f"fraction_{cfg.fraction:g}").is_dir()]
    if not modes:
        raise FileNotFoundError(f"no trained runs under {run_dir} for fraction {cfg.fraction:g}")
    # the split must match the one used in training, so take it from the echoed config
    splits = set()
    for m in modes:
        echo = run_dir / m / f"fraction_{cfg.fraction:g}" / "config.txt"
        trained = load_run_config(echo) if echo.exists() else cfg
        splits.add((trained.k, trained.seed))
    if len(splits) != 1:
        raise ValueError(f"runs under {run_dir} disagree on (k, seed): {sorted(splits)}")
    k, seed = splits.pop()
    plan = kfold_split(len(samples), k, seed)
    preds = {m: _fold_predictions(run_dir, m, cfg.fraction, plan, images) for m in modes}
    report = constraint_report(preds, labels, cfg.constraint_params(), cfg.fraction, sids)
    ext = {"csv": "csv", "json": "json", "text": "txt"}[fmt]
    path = run_dir / f"report_fraction_{cfg.fraction:g}.{ext}"
    emit_report(report, path, fmt)
    print(format_table(report))
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(trials, seed):
    rows = run_suite(trials=trials, seed=seed)
    print(format_rows(rows))
    return 0 if all(r.passed for r in rows) else 1


def dice_table(reports):
    fractions = sorted({r.fraction for r in reports}, reverse=True)
    models = [m for m in ("baseline", "ltn") if any(row.model == m for r in reports for row in r.rows)]
    header = f"{'Model':<10}" + "".join(f"{'fraction ' + format(f, 'g'):>20}" for f in fractions)
    lines = [header, "-" * len(header)]
    for m in models:
        cells = []
        for f in fractions:
            rows = [row for r in reports if r.fraction == f for row in r.rows if row.model == m]
            cells.append(f"{rows[0].dice_mean:.4f} ± {rows[0].dice_std:.4f}" if rows else "-")
        lines.append(f"{m:<10}" + "".join(f"{c:>20}" for c in cells))
    return "\n".join(lines)


def cmd_report(paths):
    reports = [read_report(p) for p in paths]
    print("Dice by training fraction")
    print(dice_table(reports))
    for rep in sorted(reports, key=lambda r: -r.fraction):
        print(f"\nConstraint satisfaction, fraction {rep.fraction:g}")
        print(format_table(rep))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="ltnseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "train"):
        _add_config_flags(sub.add_parser(name))
    ev = sub.add_parser("evaluate")
    _add_config_flags(ev)
    ev.add_argument("--format", choices=("csv", "json", "text"), default="csv")
    gc = sub.add_parser("gradcheck")
    gc.add_argument("--trials", type=int, default=100)
    gc.add_argument("--suite-seed", type=int, default=0)
    rp = sub.add_parser("report")
    rp.add_argument("reports", nargs="+", help="csv or json files written by evaluate")
    return parser


def _fail(exc):
    message = str(exc).replace("\n", " ")
    print(f"ltnseg: error={type(exc).__name__} message={message!r}", file=sys.stderr)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.trials, args.suite_seed)
        if args.command == "report":
            return cmd_report(args.reports)
        cfg = _resolve(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        return cmd_evaluate(cfg, args.format)
    except (UsageError, ConfigError) as exc:
        _fail(exc)
        parser.print_usage(sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        _fail(exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
