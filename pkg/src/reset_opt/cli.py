"""``reset-opt`` command line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure (a
diverged run or a failed optimum search), 4 input/output error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .config import ConfigError, load

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
COMMANDS = {"mfpt": harness.cmd_mfpt, "train": harness.cmd_train,
            "sweep": harness.cmd_sweep, "diagnose": harness.cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reset-opt",
        description="SGD with stochastic resetting: MFPT theory, training, sweeps, diagnostics.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--out", default=None,
                        help=f"output directory (default: config output_dir, ${harness.OUT_ENV}, "
                             f"or ./{harness.DEFAULT_OUT})")
    parser.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    parser.add_argument("--seed-base", type=int, default=None,
                        help="offset added to every configured seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load(args.config)
        out = harness.output_dir(cfg, args.out)
        result = COMMANDS[args.command](cfg, out, args.workers, args.seed_base)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    failed = result.get("failed", 0)
    print(f"{args.command}: wrote {out} (config_hash={result['config_hash']})")
    if failed:
        print(f"{failed} run(s) diverged; see the status column", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
