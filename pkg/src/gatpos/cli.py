"""``gatpos`` command line: train, reproduce, stats and verify.

Exit codes: 0 success, 1 runtime or check failure, 2 usage error.
Settings resolve as command-line flag, then config file, then built-in default.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import autodiff, published
from .exceptions import ConfigError, DatasetFormatError, GatposError, TrainingAborted
from .graph import generate_splits, homophily_beta, load_dataset, load_splits
from .io import write_json, write_loss_curve, write_params
from .layers import MODEL_KINDS
from .training import (
    _SPLIT_STREAM,
    REGIMES,
    ExperimentConfig,
    ExperimentFailed,
    derive_seed,
    format_cell,
    run_experiment,
    train_run,
)
from .verify import main_report

logger = logging.getLogger("gatpos")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
DATASETS_ENV = "GATPOS_DATASETS"
SPLITS_SUBDIR = "splits"
BETA_TOLERANCE = 0.02


class UsageError(Exception):
    pass


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    unknown = sorted(set(doc) - set(ExperimentConfig.field_names()))
    if unknown:
        raise UsageError(f"config file {path}: unknown keys: {', '.join(unknown)}")
    return doc


def _datasets_root(arg) -> Path:
    root = arg or os.environ.get(DATASETS_ENV)
    if not root:
        raise UsageError(f"no datasets root: pass --datasets-root or set {DATASETS_ENV}")
    return Path(root)


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    data_dir = Path(args.dataset)
    if not data_dir.is_dir():
        raise UsageError(f"dataset directory not found: {data_dir}")
    file_cfg = _read_config(args.config)
    dataset = load_dataset(data_dir)
    try:
        config = ExperimentConfig.from_mapping(
            file_cfg, dataset=dataset.name, model=args.model, seed=args.seed, regime=args.regime
        )
    except ConfigError as exc:
        raise UsageError(str(exc)) from None

    if args.split:
        split = load_splits(args.split, dataset.num_nodes)
    else:
        split = generate_splits(dataset, derive_seed(config.seed, 0, _SPLIT_STREAM))
    seed = derive_seed(config.seed, 0, 0)
    model, result = train_run(dataset, split, config, seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "config": config.to_dict(),
        "dataset": {"name": dataset.name, "num_nodes": dataset.num_nodes, "path": str(data_dir)},
        "run_seed": seed,
        "split_sizes": [len(split.train_idx), len(split.val_idx), len(split.test_idx)],
        **result.to_json(),
    }
    write_json(doc, out / "result.json")
    write_params(model.params, out / "params.bin")
    write_loss_curve(result.history, out / "losses.csv")
    logger.info("wrote %s (%.1fs)", out, result.wall_time)
    print(f"test_acc={result.test_accuracy:.6f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# reproduce


def _published_cell(model, regime, name) -> str:
    ref = published.ACCURACY.get((model, regime, name))
    return format_cell(ref[0] / 100, ref[1] / 100) if ref else "n/a"


def render_table(datasets, rows, cells) -> str:
    """Markdown table with a measured and a published column per dataset."""
    header = ["Method"]
    for name in datasets:
        header += [name.capitalize(), f"{name.capitalize()} (published)"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for label, model, regime in rows:
        row = [label]
        for name in datasets:
            row += [cells.get((label, name), "skipped"), _published_cell(model, regime, name)]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines)


def cmd_reproduce(args) -> int:
    root = _datasets_root(args.datasets_root)
    file_cfg = _read_config(args.config)
    datasets, rows = published.TABLES[args.table]
    cells, results, failures, skipped = {}, [], 0, 0
    for name in datasets:
        data_dir = root / name
        try:
            dataset = load_dataset(data_dir, name=name)
        except (FileNotFoundError, DatasetFormatError) as exc:
            logger.warning("skipping %s: %s", name, exc)
            skipped += len(rows)
            continue
        split_dir = data_dir / SPLITS_SUBDIR
        for label, model, regime in rows:
            try:
                config = ExperimentConfig.from_mapping(
                    {**file_cfg, "dataset": name, "model": model, "regime": regime},
                    seed=args.seed, runs_per_split=args.runs_per_split, num_splits=args.num_splits,
                    splits=str(split_dir) if split_dir.is_dir() else None,
                )
            except ConfigError as exc:
                raise UsageError(str(exc)) from None
            logger.info("%s / %s: %d splits x %d runs", name, label, config.num_splits, config.runs_per_split)
            try:
                agg = run_experiment(config, dataset, jobs=args.jobs)
            except ExperimentFailed as exc:
                logger.error("%s / %s failed: %s", name, label, exc)
                cells[(label, name)] = "failed"
                failures += 1
                continue
            cells[(label, name)] = agg.cell()
            results.append({"dataset": name, "method": label, **agg.to_json()})

    table = render_table(datasets, rows, cells)
    print(table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.table}.md").write_text(table + "\n")
    write_json({"table": args.table, "cells": results}, out / f"{args.table}.json")
    if skipped == len(datasets) * len(rows):
        logger.error("every cell was skipped; no dataset packages under %s", root)
        return EXIT_FAILURE
    return EXIT_FAILURE if failures else EXIT_OK


# --------------------------------------------------------------------------
# stats


def dataset_stats_rows(root: Path):
    """``(name, stats dict | None, error | None)`` per dataset directory under ``root``."""
    names = sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    for name in names:
        try:
            ds = load_dataset(root / name, name=name)
        except (FileNotFoundError, DatasetFormatError) as exc:
            yield name, None, str(exc)
            continue
        yield name, {
            "nodes": ds.num_nodes,
            "arcs": ds.graph.num_arcs,
            "edges": ds.raw_edge_count,
            "features": ds.num_features,
            "classes": ds.num_classes,
            "beta": homophily_beta(ds),
        }, None


def cmd_stats(args) -> int:
    root = _datasets_root(args.datasets_root)
    print("| Dataset | N | arcs | edges | D | C | beta | published beta |")
    print("|---|---|---|---|---|---|---|---|")
    ok = 0
    for name, stats, error in dataset_stats_rows(root):
        if error:
            print(f"error: {name}: {error}")
            continue
        ok += 1
        ref = published.DATASET_STATS.get(name.lower())
        note = "n/a"
        if ref:
            within = abs(stats["beta"] - ref[4]) <= BETA_TOLERANCE
            note = f"{ref[4]:.2f} ({'within' if within else 'outside'} ±{BETA_TOLERANCE})"
        print(f"| {name} | {stats['nodes']} | {stats['arcs']} | {stats['edges']} | {stats['features']} "
              f"| {stats['classes']} | {stats['beta']:.2f} | {note} |")
    if not ok:
        logger.error("no readable dataset packages under %s", root)
        return EXIT_FAILURE
    return EXIT_OK


# --------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    if args.inject_fault:
        autodiff.FAULTS.add(args.inject_fault)
    try:
        ok = main_report(tol=args.tol, seed=args.seed)
    finally:
        autodiff.FAULTS.discard(args.inject_fault)
    return EXIT_OK if ok else EXIT_FAILURE


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatpos", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and evaluate one model")
    p.add_argument("--dataset", required=True, help="dataset package directory")
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--config", help="TOML file of experiment settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--regime", choices=REGIMES)
    p.add_argument("--split", help="split JSON file (default: generated from the seed)")
    p.add_argument("--out", default="run", help="output directory (default: ./run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reproduce", help="rerun a results table")
    p.add_argument("--table", required=True, choices=sorted(published.TABLES))
    p.add_argument("--datasets-root", help=f"directory of dataset packages (default: ${DATASETS_ENV})")
    p.add_argument("--runs-per-split", type=int)
    p.add_argument("--num-splits", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="TOML file of experiment settings")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", default=".", help="directory for the .md and .json artifacts")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("stats", help="dataset statistics and homophily")
    p.add_argument("--datasets-root", help=f"directory of dataset packages (default: ${DATASETS_ENV})")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("verify", help="gradient checks, invariants and oracle comparisons")
    p.add_argument("--tol", type=float, default=1e-4, help="relative error bound for gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", choices=["leaky_relu_sign"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        parser.print_usage(sys.stderr)
        print("gatpos: error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"gatpos: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"gatpos: training aborted: {exc} (epoch {exc.epoch}, term {exc.term})", file=sys.stderr)
        return EXIT_FAILURE
    except GatposError as exc:
        print(f"gatpos: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
