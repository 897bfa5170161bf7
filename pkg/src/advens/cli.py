"""Command-line entry point: ``advens <subcommand> --config PATH --out DIR``.

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError
from .experiment import SUBCOMMAND_MODES, run_experiment

log = logging.getLogger("advens")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advens", description="Robust ensemble experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, modes in SUBCOMMAND_MODES.items():
        p = sub.add_parser(name, help=f"run a config with mode in {{{', '.join(modes)}}}")
        p.add_argument("--config", required=True, help="key = value experiment file")
        p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        log.error("invalid config: %s", exc)
        return EXIT_INVALID
    if cfg.mode not in SUBCOMMAND_MODES[args.command]:
        log.error("subcommand %r does not run mode %r", args.command, cfg.mode)
        return EXIT_INVALID
    try:
        out = run_experiment(cfg, args.out, subcommand=args.command)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to one exit code
        log.error("run failed: %s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    log.warning("wrote %s", out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
