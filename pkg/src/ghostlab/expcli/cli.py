"""Command-line entry point: ``ghostlab <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, parse_seeds, preset
from .runners import run_check, run_experiment

SUBCOMMANDS = {
    "fig2a": "fig2a",
    "fig2": "fig2bcd",
    "fig3": "fig3",
    "fig4": "fig4",
    "figS1": "figS1",
    "figS2": "figS2",
    "custom": "custom",
    "check": None,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; fields override the preset")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seeds", help="seed count (e.g. 10) or comma list (e.g. 0,3,7)")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="set one config field; repeatable")
    common.add_argument("--paper-scale", action="store_true",
                        help="use caption-sized cohorts instead of desk-scale ones")
    common.add_argument("--workers", type=int, help="parallel worker processes")

    parser = argparse.ArgumentParser(prog="ghostlab",
                                     description="ghost-point learning experiments")
    sub = parser.add_subparsers(dest="command", metavar="|".join(SUBCOMMANDS))
    sub.required = True
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} preset"
                       if name != "check" else "run the invariant suite")
    return parser


def resolve(args) -> ExperimentConfig:
    kind = SUBCOMMANDS[args.command] or "custom"
    cfg = preset(kind, paper_scale=args.paper_scale)
    if args.config:
        data = json.loads(Path(args.config).read_text())
        data.pop("derived", None)
        merged = cfg.to_dict()
        merged.update(data)
        merged["kind"] = kind
        cfg = ExperimentConfig.from_dict(merged)
    for item in args.override:
        cfg = cfg.with_override(item)
    if args.seeds:
        cfg = cfg.replace(seeds=parse_seeds(args.seeds))
    if args.workers:
        cfg = cfg.replace(workers=args.workers)
    if args.out:
        cfg = cfg.replace(out=args.out)
    return cfg


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        parser.print_usage(sys.stderr)
        print(f"ghostlab: error: {exc}", file=sys.stderr)
        return 2

    if args.command == "check":
        ok, lines = run_check(cfg, args.out)
        print("\n".join(lines))
        return 0 if ok else 1

    result = run_experiment(cfg)
    print(f"{args.command}: wrote {cfg.out}")
    summary = getattr(result, "as_dict", None)
    if summary is not None:
        print(json.dumps(summary(), sort_keys=True))
    return 0


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
