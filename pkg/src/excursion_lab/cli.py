"""Command-line entry point ``excursion-lab``."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigInvalid, MissingOutputs
from .harness import SUITES, check, load_config, run

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK = 2


def build_parser():
    p = argparse.ArgumentParser(prog="excursion-lab",
                                description="Monte Carlo suites for excursion-set functionals.")
    p.add_argument("suite", choices=SUITES)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: config, EXCURSION_LAB_WORKERS, CPU count)")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--check", action="store_true", help="evaluate acceptance criteria")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, workers=args.workers, out=args.out)
        if cfg.suite != args.suite:
            raise ConfigInvalid(f"config is for suite {cfg.suite!r}, not {args.suite!r}")
        manifest = run(cfg)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{cfg.suite}: wrote {cfg.out}")
    for w in manifest.warnings:
        print(f"warning: {w}")
    if not args.check:
        return EXIT_OK
    try:
        verdict = check(manifest, cfg.out)
    except MissingOutputs as exc:
        print(f"check error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    for c in verdict["criteria"]:
        print(f"criterion {c['id']} {c['name']}: {'PASS' if c['pass'] else 'FAIL'} ({c['detail']})")
    return EXIT_OK if verdict["all_pass"] else EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
