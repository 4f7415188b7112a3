"""``macr`` command line: split, train, tune-c, evaluate, analyze, reproduce, synth.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, default_values, load_config
from .dataset import (DataError, build_debiased_split, item_popularity, load_interactions, load_split,
                      save_split)
from .evaluation import (analyze_branch_activation, analyze_group_recall, analyze_recommendation_frequency,
                         evaluate, test_sets)
from .experiments import run_variant
from .synthetic import popularity_biased_interactions, write_log
from .trainer import NumericalError, build_model, train, tune_reference_c

log = logging.getLogger("macr")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p):
    p.add_argument("--config", help="INI file; flags override its values")
    for key, default in default_values().items():
        flags = [f"--{key.replace('_', '-')}"]
        if "_" in key:
            flags.append(f"--{key}")
        if isinstance(default, bool):
            p.add_argument(*flags, dest=key, action="store_const", const="true", default=None)
        else:
            p.add_argument(*flags, dest=key, default=None, metavar=key.upper())


def _resolve(args) -> ExperimentConfig:
    overrides = {k: getattr(args, k) for k in default_values() if getattr(args, k, None) is not None}
    return load_config(args.config, overrides)


def _echo_config(cfg, directory):
    os.makedirs(directory, exist_ok=True)
    cfg.write(os.path.join(directory, "config.ini"))


def _checkpoint_path(cfg):
    return os.path.join(cfg.out_dir, "checkpoint.bin")


def _load_model(cfg):
    split = load_split(cfg.resolved_split_dir)
    path = _checkpoint_path(cfg)
    if not os.path.exists(path):
        raise DataError(f"no checkpoint at {path}; run `macr train` first")
    model, header = load_checkpoint(path, split.train)
    return split, model, header


def _reference_c(cfg):
    if cfg.c is not None:
        return cfg.c
    path = os.path.join(cfg.out_dir, "c.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            return float(json.load(fh)["c"])
    raise UsageError("TIE mode needs --c or a prior `macr tune-c` run")


def cmd_split(cfg):
    if not cfg.data:
        raise UsageError("--data is required for split")
    data, id_map = load_interactions(cfg.data, cfg.delimiter_char)
    split = build_debiased_split(data, cfg.split_spec, id_map)
    out = cfg.resolved_split_dir
    save_split(split, out, cfg.split_seed)
    _echo_config(cfg, out)
    print(f"split {len(data)} interactions -> train {len(split.train)}, valid {len(split.valid)}, "
          f"test {len(split.test)} in {out}")


def cmd_train(cfg):
    split = load_split(cfg.resolved_split_dir)
    model = build_model(cfg.train, split.n_users, split.n_items, split.train)
    model, report = train(model, split, cfg.train,
                          progress=lambda rec: log.info("epoch %(epoch)d total %(total).5f", rec))
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_checkpoint(model, _checkpoint_path(cfg), epoch=len(report.epochs),
                    extra={"best_epoch": report.best_epoch})
    report.write_jsonl(os.path.join(cfg.out_dir, "train_log.jsonl"))
    _echo_config(cfg, cfg.out_dir)
    print(f"trained {cfg.train.model}/{cfg.train.backbone} for {len(report.epochs)} epochs "
          f"in {report.wall_clock:.1f}s -> {_checkpoint_path(cfg)}")


def cmd_tune_c(cfg):
    split, model, _ = _load_model(cfg)
    c, rows = tune_reference_c(model, split, cfg.train)
    with open(os.path.join(cfg.out_dir, "c_sweep.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    with open(os.path.join(cfg.out_dir, "c.json"), "w", encoding="utf-8") as fh:
        json.dump({"c": c, "metric": cfg.train.eval_metric, "K": cfg.train.eval_k}, fh)
        fh.write("\n")
    _echo_config(cfg, cfg.out_dir)
    print(f"c = {c:g}")


def cmd_evaluate(cfg):
    split, model, _ = _load_model(cfg)
    c = _reference_c(cfg) if cfg.mode == "TIE" else None
    report, _ = evaluate(model, split, cfg.ks, mode=cfg.mode, c=c, threads=cfg.threads)
    stem = os.path.join(cfg.out_dir, f"metrics_{cfg.mode.lower()}")
    report.to_csv(stem + ".csv")
    report.to_json(stem + ".json")
    _echo_config(cfg, cfg.out_dir)
    for row in report.rows():
        print(f"K={row['K']:>3}  HR={row['HR']:.4f}  Recall={row['Recall']:.4f}  NDCG={row['NDCG']:.4f}")


def cmd_analyze(cfg):
    split, model, _ = _load_model(cfg)
    c = None
    if cfg.mode == "TIE" and model.kind == "macr":
        c = _reference_c(cfg)
    _, ranking = evaluate(model, split, cfg.ks, mode="TIE" if c is not None else "TE", c=c, threads=cfg.threads)
    profile = item_popularity(split.train, cfg.n_bins, cfg.bin_policy)
    out = os.path.join(cfg.out_dir, "analysis")
    os.makedirs(out, exist_ok=True)
    analyze_recommendation_frequency(ranking, profile).to_csv(os.path.join(out, "recommendation_frequency.csv"))
    analyze_group_recall(ranking, test_sets(split.test), profile).to_csv(os.path.join(out, "item_recall.csv"))
    analyze_branch_activation(model, "item", split.train.item_degrees(), cfg.n_bins, cfg.bin_policy).to_csv(
        os.path.join(out, "item_branch.csv"))
    analyze_branch_activation(model, "user", split.train.user_degrees(), cfg.n_bins, cfg.bin_policy).to_csv(
        os.path.join(out, "user_branch.csv"))
    _echo_config(cfg, out)
    print(f"analysis tables in {out}")


def cmd_reproduce(cfg, variants):
    if not os.path.exists(os.path.join(cfg.resolved_split_dir, "meta.jsonl")):
        cmd_split(cfg)
    split = load_split(cfg.resolved_split_dir)
    rows = []
    for name in variants:
        res = run_variant(name, split, cfg.train, cfg.ks)
        vdir = os.path.join(cfg.out_dir, name)
        os.makedirs(vdir, exist_ok=True)
        save_checkpoint(res.model, os.path.join(vdir, "checkpoint.bin"), epoch=len(res.report.epochs))
        res.report.write_jsonl(os.path.join(vdir, "train_log.jsonl"))
        res.metrics.to_csv(os.path.join(vdir, "metrics.csv"))
        rows.append(res.summary(max(cfg.ks)))
        print(f"{name:<28} HR={rows[-1]['HR']:.4f} Recall={rows[-1]['Recall']:.4f} NDCG={rows[-1]['NDCG']:.4f}")
    with open(os.path.join(cfg.out_dir, "summary.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    _echo_config(cfg, cfg.out_dir)


def build_parser():
    parser = _Parser(prog="macr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("split", "write the debiased train/valid/test split"),
                        ("train", "train the configured model"),
                        ("tune-c", "sweep the counterfactual reference c on validation"),
                        ("evaluate", "score the checkpoint on test"),
                        ("analyze", "emit popularity-group analysis tables")):
        _add_config_flags(sub.add_parser(name, help=help_))
    rep = sub.add_parser("reproduce", help="split, train and evaluate several variants")
    _add_config_flags(rep)
    rep.add_argument("--variants", default="MF,MACR_MF", help="comma-separated, e.g. MF,MACR_MF,IPW_MF")
    syn = sub.add_parser("synth", help="write a synthetic popularity-biased interaction log")
    syn.add_argument("output")
    syn.add_argument("--users", type=int, default=2000)
    syn.add_argument("--items", type=int, default=300)
    syn.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "synth":
            write_log(popularity_biased_interactions(args.users, args.items, seed=args.seed), args.output)
            return 0
        if getattr(args, "mode", None) and args.mode.upper() not in ("TE", "TIE"):
            raise UsageError(f"unknown mode {args.mode!r}; expected te or tie")
        cfg = _resolve(args)
        if args.command == "reproduce":
            cmd_reproduce(cfg, [v.strip() for v in args.variants.split(",") if v.strip()])
        else:
            {"split": cmd_split, "train": cmd_train, "tune-c": cmd_tune_c,
             "evaluate": cmd_evaluate, "analyze": cmd_analyze}[args.command](cfg)
    except (UsageError, ConfigError) as exc:
        print(f"macr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"macr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"macr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"macr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
