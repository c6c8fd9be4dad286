"""``ddlab`` command line: ``run``, ``validate`` and ``list-families``.

Exit codes: 0 when every assertion passes, 2 when an assertion fails,
1 on a configuration or runtime error.
"""

from __future__ import annotations

import argparse
import sys

from ddlab import __version__
from ddlab.distortion import FAMILIES, SEQUENCES
from ddlab.harness import ConfigError, load_config, run

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ASSERTION = 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddlab", description="Distorted Ornstein-Uhlenbeck path-law laboratory.")
    p.add_argument("--version", action="version", version=f"ddlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("-o", "--output", help="output directory (overrides the config's 'output')")
    r.add_argument("--lanes", type=int, help="worker threads (overrides DDLAB_LANES and the config)")
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    sub.add_parser("list-families", help="print the distortion and sequence grammar")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "list-families":
        print("families:")
        for name, (example, doc) in FAMILIES.items():
            print(f"  {example:<36} {doc}")
        print("sequences:")
        for name, (example, doc) in SEQUENCES.items():
            print(f"  {example:<36} {doc}")
        return EXIT_OK
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"ddlab: config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if args.command == "validate":
        print(f"ok: {cfg.kind} config, run hash {cfg.hash}")
        return EXIT_OK
    try:
        result, out = run(cfg, args.output, args.lanes)
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"ddlab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for c in result.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status}  {c.name}" + (f"  ({c.detail})" if c.detail else ""))
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {out}")
    return EXIT_OK if result.passed else EXIT_ASSERTION


if __name__ == "__main__":
    sys.exit(main())
