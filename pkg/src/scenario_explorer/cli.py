"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 surrogate fit failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import explorer
from .metrics import MetricError
from .optimizer import FitError
from .scenarios import ScenarioError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FIT = 3


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenex", description="Search driving-scenario parameter grids for critical cases.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("explore", help="Bayesian exploration of a scenario grid")
    e.add_argument("config")
    e.add_argument("--output-dir")

    o = sub.add_parser("oracle", help="simulate every cell of a strided grid")
    o.add_argument("config")
    o.add_argument("--stride", type=_ints, default=None, help="per-dim strides, e.g. 5,25,10")
    o.add_argument("--output-dir")

    r = sub.add_parser("replay", help="simulate one scenario and dump its trace")
    r.add_argument("config")
    at = r.add_mutually_exclusive_group(required=True)
    at.add_argument("--at", type=_floats, help="lattice values of the free dims")
    at.add_argument("--index", type=_ints, help="grid index of the free dims")
    r.add_argument("--output-dir")

    h = sub.add_parser("heatmap", help="min-reduce a record file onto two dims")
    h.add_argument("records")
    h.add_argument("--x", required=True)
    h.add_argument("--y", required=True)
    h.add_argument("--out", help="output CSV (default: next to the records)")
    return p


def _cmd_explore(args) -> int:
    cfg = explorer.parse_config(args.config)
    report = explorer.explore(cfg, args.output_dir)
    inc = report.incumbent
    print(f"{len(report.history)} evaluations; incumbent {cfg.metric.value}={inc.value:.6g} at {inc.values}")
    return EXIT_OK


def _cmd_oracle(args) -> int:
    cfg = explorer.parse_config(args.config)
    table = explorer.grid_oracle(cfg, args.stride, args.output_dir)
    best = min(table.records, key=lambda r: r.value)
    print(f"{len(table.records)} cells; minimum {cfg.metric.value}={best.value:.6g} at {best.values}")
    return EXIT_OK


def _cmd_replay(args) -> int:
    cfg = explorer.parse_config(args.config)
    result = explorer.replay(cfg, values=args.at, index=args.index, output_dir=args.output_dir)
    print(json.dumps(result.breakdown(), sort_keys=True, indent=2))
    print(f"trace written to {result.csv_path}")
    return EXIT_OK


def _cmd_heatmap(args) -> int:
    out = args.out or str(Path(args.records).with_suffix("")) + f"_heatmap_{args.x}_{args.y}.csv"
    explorer.export_heatmap(args.records, args.x, args.y, out)
    print(f"heatmap written to {out}")
    return EXIT_OK


COMMANDS = {"explore": _cmd_explore, "oracle": _cmd_oracle, "replay": _cmd_replay, "heatmap": _cmd_heatmap}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (explorer.ConfigError, ScenarioError, MetricError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FitError as exc:
        print(f"fit failure: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
