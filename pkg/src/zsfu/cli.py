"""Command-line entry point: ``zsfu run|audit|tables|figures|schema``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config, load_schema
from .data import DATA_ROOT_ENV, DatasetLoadError
from .pipeline import PipelineError, StateMismatch, audit_against, run_experiment
from .report import emit_figures, emit_tables

log = logging.getLogger("zsfu")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.output_dir:
        cfg.output_dir = args.output_dir
    try:
        results = run_experiment(cfg, reuse_from=args.reuse_from, data_root=args.data_root,
                                 seeds=args.seeds)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except StateMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for res in results:
        ours = res.reports.get("ours")
        if ours is not None:
            print(f"{res.run_dir}: acc_Dr={ours.acc_Dr_test:.2f} acc_Df={ours.acc_Df_test:.2f} "
                  f"jsd={ours.jsd:.4f} mia_Df={ours.mia_Df if ours.mia_Df is not None else float('nan'):.2f}")
    return EXIT_OK


def _cmd_audit(args) -> int:
    try:
        reports = audit_against(args.run_dir, args.against, args.data_root)
    except (FileNotFoundError, DatasetLoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for name, rep in reports.items():
        print(name, json.dumps({k: v for k, v in rep.flat().items() if k != "method"}))
    return EXIT_OK


def _cmd_tables(args) -> int:
    try:
        csv_path, txt_path = emit_tables(args.dirs, args.out)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(txt_path.read_text(), end="")
    print(f"wrote {csv_path} and {txt_path}")
    return EXIT_OK


def _cmd_figures(args) -> int:
    try:
        paths = emit_figures(args.dirs, args.out)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _cmd_schema(args) -> int:
    print(json.dumps(load_schema(), indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zsfu", description="Zero-shot federated class unlearning experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--data-root", default=os.environ.get(DATA_ROOT_ENV),
                   help=f"dataset cache directory (default: ${DATA_ROOT_ENV})")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config end to end")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override output_dir from the config")
    r.add_argument("--reuse-from", help="copy matching completed phases from another experiment dir")
    r.add_argument("--seeds", type=int, nargs="+", help="override the config's seed list")
    r.set_defaults(func=_cmd_run)

    a = sub.add_parser("audit", help="re-audit a run against another run's retrained model")
    a.add_argument("run_dir")
    a.add_argument("--against", required=True, help="run dir holding retrained.ckpt")
    a.set_defaults(func=_cmd_audit)

    t = sub.add_parser("tables", help="comparison tables from completed runs")
    t.add_argument("dirs", nargs="+")
    t.add_argument("--out", default="tables")
    t.set_defaults(func=_cmd_tables)

    f = sub.add_parser("figures", help="bar and box charts from completed runs")
    f.add_argument("dirs", nargs="+")
    f.add_argument("--out", default="figures")
    f.set_defaults(func=_cmd_figures)

    s = sub.add_parser("schema", help="print the config JSON schema")
    s.set_defaults(func=_cmd_schema)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
