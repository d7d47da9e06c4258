"""Command-line entry point: ``cimworst <pipeline> --config run.ini [--thg X] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .data import DataError, fetch
from .device import BoundViolation
from .experiment import PIPELINES, StageError, run_experiment
from .models import TrainingDiverged
from .numerics.checkpoint import CheckpointError
from .search import InfeasibleBound, NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

_NUMERIC = (NumericalFailure, TrainingDiverged, InfeasibleBound, BoundViolation, FloatingPointError)
_DATA = (DataError, CheckpointError, OSError)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cimworst", description="Worst-case weight perturbation experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in PIPELINES:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI file; omitted keys take their defaults")
        s.add_argument("--thg", type=float, help="override the perturbation bound")
        s.add_argument("--seed", type=int, help="run with this single seed")
        s.add_argument("--out", help="output directory")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config key (repeatable)")
    f = sub.add_parser("fetch", help="download and verify a dataset archive")
    f.add_argument("dataset", choices=["mnist", "cifar10"])
    f.add_argument("--dir", help="target directory (default: data/<dataset>)")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = val
    if args.thg is not None:
        out["experiment.th_g"] = repr(args.thg)
    if args.seed is not None:
        out["experiment.seeds"] = str(args.seed)
    if args.out is not None:
        out["experiment.out"] = args.out
    return out


def _classify(err: BaseException) -> int:
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, _NUMERIC):
        return EXIT_NUMERIC
    if isinstance(err, _DATA):
        return EXIT_DATA
    raise err


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fetch":
            print(fetch(args.dataset, args.dir or f"data/{args.dataset}"))
            return EXIT_OK
        cfg = load_config(args.config, _overrides(args))
        out = run_experiment(cfg, args.command)
    except StageError as err:
        code = _classify(err.cause)
        print(f"error: {err}", file=sys.stderr)
        return code
    except (ConfigError, DataError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return _classify(err)
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
