"""Command-line front door: ``speclab <experiment> --config file.json``.

The experiment name on the command line selects the handler; the config
file carries everything else.  ``--override key=value`` patches the raw
config by dotted path before validation, so the hash embedded in every
artifact always describes the effective run.
"""

from __future__ import annotations

import argparse
import sys

from .config import EXPERIMENTS, ConfigError, load_config
from .runner import EXIT_CONFIG, EXIT_NUMERICAL, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="speclab",
        description="Desk-scale spectral diagnostics for 1D Schrodinger operators",
    )
    parser.add_argument(
        "experiment", choices=EXPERIMENTS, help="which experiment to run"
    )
    parser.add_argument(
        "--config", required=True, help="path to the JSON experiment config"
    )
    parser.add_argument(
        "--out",
        default=None,
        help="output directory (overrides the config's output_dir)",
    )
    parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help="parallel workers for sweeps (default: SPECLAB_WORKERS, then CPU count)",
    )
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config entry by dotted path; value parsed as JSON "
        "when possible (repeatable)",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(
            args.config,
            overrides=args.override,
            experiment=args.experiment,
            output_dir=args.out,
        )
        return run(config, workers=args.workers)
    except ConfigError as exc:
        print(f"speclab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"speclab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
