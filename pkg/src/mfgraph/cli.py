"""Command-line entry point (``mfgraph``).

Exit codes: 0 success, 1 other package error, 2 usage, 3 schema error,
4 data error, 5 incompatible checkpoint/cache, 6 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import defaultdict
from pathlib import Path

from . import baselines, harness
from .errors import DataError, MFGraphError, NotAPEError
from .graph import build_graph, load_skeleton, write_graph_cache
from .metrics import drift_table, evaluate_scores, write_drift_csv, write_report_csv, write_score_dump
from .pe import extract_features
from .records import (
    FilterStats,
    format_month,
    load_filtered,
    parse_month,
    partition_by_month,
    split_train_test,
    write_month_cache,
    write_records,
)
from .synthetic import make_records, make_year

logger = logging.getLogger("mfgraph")

EXIT_IO = 6


def _records(paths, year=None):
    return list(load_filtered(harness.expand_paths(paths), year=year))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_ingest(args, cfg):
    stats = FilterStats()
    records = list(load_filtered(harness.expand_paths(args.inputs), year=args.year, stats=stats))
    out = Path(args.out)
    written = write_month_cache(partition_by_month(records), out)
    logger.info("kept %d, dropped %d unlabeled and %d outside %s", stats.kept, stats.dropped_unlabeled,
                stats.dropped_year, args.year)
    if args.split:
        month = parse_month(args.split)
        pool = [r for r in records if r.appeared == month]
        split = split_train_test(pool, ratio=args.ratio, seed=cfg.seed)
        write_records(split.train, out / f"{args.split}-train.jsonl")
        write_records(split.test, out / f"{args.split}-test.jsonl")
        logger.info("split %s: %d train / %d test", args.split, len(split.train), len(split.test))
    for p in written:
        print(p)
    return 0


def _read_label_map(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return {row[0]: int(row[1]) for row in csv.reader(fh) if row and not row[0].startswith("#")}


def cmd_extract(args, cfg):
    labels = None
    if args.label == "from-manifest":
        if not args.manifest:
            raise DataError("--label from-manifest needs --manifest")
        labels = _read_label_map(args.manifest)
    appeared = parse_month(args.appeared)
    files = []
    for spec in args.inputs:
        p = Path(spec)
        files.extend(sorted(q for q in p.iterdir() if q.is_file()) if p.is_dir() else [p])
    records, skipped = [], 0
    for f in files:
        label = int(args.label) if labels is None else labels.get(f.name, -1)
        try:
            records.append(extract_features(f.read_bytes(), appeared, label))
        except NotAPEError as exc:
            if args.strict:
                raise
            skipped += 1
            logger.warning("skipping %s: %s", f, exc)
    n = write_records(records, args.out)
    logger.info("extracted %d records, skipped %d non-PE files", n, skipped)
    return 0


def cmd_build_graphs(args, cfg):
    skeleton = load_skeleton(args.skeleton or cfg.skeleton)
    records = _records(args.inputs)
    graphs = [build_graph(r, skeleton, strategy=args.strategy) for r in records]
    if args.by_month:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        groups = defaultdict(list)
        for g in graphs:
            groups[format_month(g.appeared)].append(g)
        for month in sorted(groups):
            write_graph_cache(groups[month], out / f"{month}.jsonl")
            print(out / f"{month}.jsonl")
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_graph_cache(graphs, args.out)
        print(args.out)
    logger.info("built %d graphs with skeleton %s", len(graphs), skeleton.name)
    return 0


def cmd_cv(args, cfg):
    graphs, _ = harness.load_graphs(args.train or cfg.train_paths)
    result = harness.run_cv_search(cfg, graphs, out_dir=args.out)
    print("best cell:", " ".join(f"{k}={v}" for k, v in result.best.items()))
    return 0


def cmd_train(args, cfg):
    if args.train:
        cfg.train_paths = harness.expand_paths(args.train)
    val = harness.load_graphs(args.val)[0] if args.val else None
    ckpt, manifest = harness.train_model(cfg, args.out, val_graphs=val)
    print(ckpt)
    return 0


def cmd_eval(args, cfg):
    graphs, _ = harness.load_graphs(args.data or cfg.test_paths)
    report = harness.evaluate_model(args.checkpoint, graphs, args.name, out_dir=args.out)
    print(" ".join(f"{k}={v}" for k, v in report.as_row().items()))
    return 0


def _group_by_month(graphs):
    groups = defaultdict(list)
    for g in graphs:
        groups[format_month(g.appeared)].append(g)
    return groups


def cmd_drift(args, cfg):
    buckets = _group_by_month(harness.load_graphs(args.months)[0])
    holdout = None
    if args.holdout:
        held = harness.load_graphs([args.holdout])[0]
        key = args.holdout_month or format_month(held[0].appeared)
        if key in buckets:
            raise DataError(f"hold-out month {key} also appears among the drift buckets")
        holdout = (key, held)
    table = harness.run_drift(args.checkpoint, buckets, out_dir=args.out, holdout=holdout)
    for m, r in table.months.items():
        print(f"Test-{m} auc={r.auc} acc={r.accuracy} f1={r.f1}")
    print("DegRate", " ".join(f"{k}={v}" for k, v in table.degradation.items()))
    return 0


def _baseline_scores(kind, model_args, x_train, y_train, x):
    if kind == "knn":
        return baselines.knn_predict_batch(x_train, y_train, x, model_args["k_nn"])[1]
    probs = model_args["model"].predict_proba(x)
    return probs if kind == "logreg" else probs[:, 1]


def cmd_baseline(args, cfg):
    x_train, y_train = baselines.flat_dataset(_records(args.train))
    if len(y_train) == 0:
        raise DataError("baseline training set is empty")
    model_args = {"k_nn": args.k_nn}
    epochs = args.epochs if args.epochs is not None else cfg.train.epochs
    if args.model == "logreg":
        model_args["model"] = baselines.train_logreg(x_train, y_train, lr=args.lr or 0.1, epochs=epochs, seed=cfg.seed)
    elif args.model == "mlp":
        model_args["model"] = baselines.train_flat_mlp(
            x_train, y_train, hidden=cfg.model.mlp_hidden, dropout=cfg.model.dropout, epochs=epochs,
            batch_size=cfg.train.batch_size, lr=args.lr or cfg.train.lr, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    if args.test:
        x, y = baselines.flat_dataset(_records(args.test))
        scores = _baseline_scores(args.model, model_args, x_train, y_train, x)
        reports.append(evaluate_scores(scores, y, "test"))
        write_score_dump(scores, y, out / f"{args.model}_test_scores.jsonl")
    if args.months:
        by_month = defaultdict(list)
        for r in _records(args.months):
            by_month[format_month(r.appeared)].append(r)
        month_reports = {}
        for m in sorted(by_month):
            x, y = baselines.flat_dataset(by_month[m])
            month_reports[m] = evaluate_scores(_baseline_scores(args.model, model_args, x_train, y_train, x), y, m)
        if len(month_reports) < 2:
            raise DataError("drift evaluation needs at least 2 monthly buckets")
        write_drift_csv(drift_table(month_reports), out / f"{args.model}_drift.csv")
        reports.extend(month_reports.values())
    write_report_csv(reports, out / f"{args.model}_report.csv")
    for r in reports:
        print(" ".join(f"{k}={v}" for k, v in r.as_row().items()))
    return 0


def cmd_synth(args, cfg):
    out = Path(args.out)
    if args.year is not None:
        buckets = make_year(args.n, seed=cfg.seed, year=args.year, drift_per_month=args.drift)
        for p in write_month_cache(buckets, out):
            print(p)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        recs = make_records(args.n, seed=cfg.seed, appeared=parse_month(args.month), drift=args.drift)
        write_records(recs, out)
        print(out)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mfgraph", description="Feature-graph malware detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="filter EMBER-style JSONL into monthly files")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="JSONL files, directories or globs")
    p.add_argument("--year", type=int, default=2018)
    p.add_argument("--split", metavar="YYYY-MM", help="also write a stratified train/test split of this month")
    p.add_argument("--ratio", type=float, default=0.8)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("extract", parents=[common], help="extract feature records from PE files")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="PE files or directories")
    p.add_argument("--appeared", required=True, metavar="YYYY-MM")
    p.add_argument("--label", choices=("-1", "0", "1", "from-manifest"), default="-1",
                   help="label for every input, or from-manifest to look each file up in --manifest")
    p.add_argument("--manifest", help="CSV of file name,label rows")
    p.add_argument("--strict", action="store_true", help="fail on the first non-PE input")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("build-graphs", parents=[common], help="turn records into a graph cache")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="record JSONL files, directories or globs")
    p.add_argument("--skeleton", help="default, variant-N or a TOML edge file")
    p.add_argument("--strategy", choices=("skeleton", "similarity"), default="skeleton")
    p.add_argument("--by-month", action="store_true", help="write one cache per month into --out")
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("cv", parents=[common], help="cross-validated hyperparameter search")
    p.add_argument("--train", nargs="+", help="graph caches (default: config [data].train)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("train", parents=[common], help="train and write checkpoint + manifest")
    p.add_argument("--train", nargs="+", help="graph caches (default: config [data].train)")
    p.add_argument("--val", nargs="+", help="validation graph caches (per-epoch F1 in the manifest)")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", nargs="+", help="graph caches (default: config [data].test)")
    p.add_argument("--name", default="test", help="dataset tag used in the report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("drift", parents=[common], help="monthly drift evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--months", nargs="+", required=True, help="graph caches; grouped by appearance month")
    p.add_argument("--holdout", help="held-out split of the training month, added as its own bucket")
    p.add_argument("--holdout-month", metavar="YYYY-MM")
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("baseline", parents=[common], help="flat-concatenation baselines")
    p.add_argument("--model", choices=("logreg", "knn", "mlp"), required=True)
    p.add_argument("--train", nargs="+", required=True, help="record JSONL files")
    p.add_argument("--test", nargs="+", help="record JSONL files")
    p.add_argument("--months", nargs="+", help="record files for a drift table")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--k-nn", type=int, default=5)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic records")
    p.add_argument("--n", type=int, default=2000, help="records (per month with --year)")
    p.add_argument("--month", default="2018-01")
    p.add_argument("--year", type=int, help="write twelve monthly files into --out")
    p.add_argument("--drift", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = harness.load_config(args.config, seed=args.seed, epochs=getattr(args, "epochs", None),
                                  jobs=getattr(args, "jobs", None))
        return args.func(args, cfg)
    except MFGraphError as exc:
        print(f"mfgraph: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mfgraph: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"mfgraph: error: {exc}", file=sys.stderr)
        return MFGraphError.exit_code


if __name__ == "__main__":
    sys.exit(main())
