"""``fibre-adiabatic`` command line entry point."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import KINDS, ConfigError, ExperimentConfig, load_config
from .experiments import ExperimentError, GuardError, run_experiment
from .rates import RateFitError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_THRESHOLD = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _eps_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.replace(",", " ").split())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid epsilon list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fibre-adiabatic", description="Adiabatic and superadiabatic reduction experiments.")
    parser.add_argument("subcommand", choices=KINDS)
    parser.add_argument("--config", type=Path, help="TOML experiment configuration")
    parser.add_argument("--out", type=Path, help="output directory (default: [output] directory)")
    parser.add_argument("--eps", type=_eps_list, help="override the epsilon list, e.g. '0.2,0.1,0.05,0.025'")
    parser.add_argument("--seed", type=int, default=0, help="seed for random initial states")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config) if args.config else ExperimentConfig()
        if args.eps:
            config = config.with_epsilon(args.eps)
        out = args.out if args.out is not None else Path(config.output.directory)
        report = run_experiment(config, args.subcommand, out_dir=out, seed=args.seed)
    except ConfigError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GuardError as exc:
        print(f"run voided: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ExperimentError, RateFitError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(report.summary())
    for path in report.files:
        print(f"wrote {path}")
    return EXIT_OK if report.passed else EXIT_THRESHOLD


if __name__ == "__main__":
    sys.exit(main())
