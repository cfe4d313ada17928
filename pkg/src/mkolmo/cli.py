"""Command-line entry point.

``mkolmo run CONFIG [--key value ...]`` executes one experiment config,
writes its artifacts, and exits 0 only if every configured assertion
holds; a config/parse problem exits 2 and a failed assertion exits 1,
naming the criterion.  ``mkolmo list-presets`` prints the model,
functional, and measure registries in a stable order.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import List, Optional

from . import __version__
from .config import ConfigError, load_config

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2


def _split_overrides(extra: List[str]) -> List[tuple]:
    """--dotted.key value pairs (also accepts --key=value)."""
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"expected --key, got {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        else:
            i += 1
            if i >= len(extra):
                raise ConfigError(f"override --{key} is missing a value")
            val = extra[i]
        if not key:
            raise ConfigError("empty override key")
        pairs.append((key, val))
        i += 1
    return pairs


def _cmd_run(args, extra: List[str]) -> int:
    from .runner import run_experiment
    try:
        pairs = _split_overrides(extra)
        if args.seed is not None:
            pairs.append(("mc.seed", str(args.seed)))
        cfg = load_config(args.config, pairs)
        record = run_experiment(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        with open(f"{record.out_dir}/summary.json") as fh:
            sys.stdout.write(fh.read())
    else:
        print(f"{record.id}: {record.kind}, "
              f"{len(next(iter(record.columns.values())))} replicas, "
              f"{record.wall_clock_s:.2f}s -> {record.out_dir}")
        for a in record.assertion_results:
            mark = "pass" if a["passed"] else "FAIL"
            print(f"  [{mark}] {a['criterion']}: value={a['value']:.6g} "
                  f"bound={a['bound']:.6g}")
    if not record.all_passed:
        print("failed criteria: " + ", ".join(record.failed),
              file=sys.stderr)
        return EXIT_ASSERTION
    return EXIT_OK


def _cmd_list_presets(args) -> int:
    from .runner import preset_table
    rows = preset_table()
    if args.json:
        json.dump([{"category": c, "name": n, "description": d}
                   for c, n, d in rows], sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        width = max(len(n) for _, n, _ in rows)
        for cat, name, desc in rows:
            print(f"{cat:<11} {name:<{width}}  {desc}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mkolmo",
        description="Weighted-particle filtering flows, measure "
                    "derivatives, and backward-representation checks.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one experiment config")
    run.add_argument("config", help="path to a TOML experiment config")
    run.add_argument("--seed", type=int, default=None,
                     help="override mc.seed")
    run.add_argument("--json", action="store_true",
                     help="print summary.json to stdout")

    lp = sub.add_parser("list-presets",
                        help="list models, functionals, and measures")
    lp.add_argument("--json", action="store_true")

    sub.add_parser("version", help="print the package version")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if args.command == "version":
        print(__version__)
        return EXIT_OK
    if args.command == "list-presets":
        if extra:
            parser.error(f"unrecognized arguments: {' '.join(extra)}")
        return _cmd_list_presets(args)
    return _cmd_run(args, extra)


if __name__ == "__main__":
    sys.exit(main())
