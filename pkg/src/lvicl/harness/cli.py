"""``lvicl`` command line: one subcommand per protocol plus report tooling.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from ..errors import ConfigError, DataError, NumericalError
from ..tsio import make_synthetic, save_csv
from .config import apply_overrides, load_config
from .report import emit_report, load_report, verify_report
from .runner import PROTOCOLS, Workspace

OUT_ENV = "LVICL_OUT_DIR"


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lvicl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in PROTOCOLS:
        p = sub.add_parser(name, help=f"run the {name} protocol")
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or the config value)")
        p.add_argument("--seed-list", type=_int_list, help="training seeds, e.g. 1,2,3")
        p.add_argument("--mode", action="append", help="forecast mode; repeat for several")
        p.add_argument("--dataset", help="CSV file instead of the synthetic series")
        p.add_argument("--horizon", type=int, action="append", help="forecast horizon; repeat for several")
    p = sub.add_parser("verify-report", help="recompute a report's aggregates from its entries")
    p.add_argument("report", type=Path)
    p = sub.add_parser("gen-synthetic", help="write the seeded synthetic dataset as CSV")
    p.add_argument("--out", type=Path, required=True, help="CSV path")
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--vars", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--period", type=int, default=24)
    return parser


def _run_protocol(args) -> int:
    cfg = load_config(args.config)
    out = args.out or (os.environ.get(OUT_ENV) or None)
    cfg = apply_overrides(
        cfg, seeds=args.seed_list, modes=args.mode, horizons=args.horizon, dataset=args.dataset, output_dir=out
    )
    report = PROTOCOLS[args.command](cfg, Workspace.from_config(cfg))
    for path in emit_report(report, cfg.output_dir):
        print(path)
    failed = [e for e in report["entries"] if e["status"] != "ok"]
    for e in failed:
        print(f"cell {e['cell_id']} failed: {e['reason']}", file=sys.stderr)
    return 3 if failed and len(failed) == len(report["entries"]) else 0


def _verify(args) -> int:
    problems = verify_report(load_report(args.report))
    for p in problems:
        print(p)
    print("report verified" if not problems else f"{len(problems)} problem(s)")
    return 0 if not problems else 3


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify-report":
            return _verify(args)
        if args.command == "gen-synthetic":
            ds = make_synthetic(args.length, args.vars, seed=args.seed, period=args.period)
            print(save_csv(ds, args.out))
            return 0
        return _run_protocol(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
