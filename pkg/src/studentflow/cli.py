"""Command line: ``studentflow {fig1,train,stability,grid} [--config F] [--seed N] [--out D] [--set k=v]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 a run diverged
(outputs are still written). Failures print one JSON object to stderr, for
example ``{"error": "config", "field": "train.max_steps", "message": "..."}``.
"""
from __future__ import annotations

import argparse
import json
import sys

from .checkpoint import CheckpointError
from .config import EXPERIMENTS, ConfigError, load_config_file, resolve_config
from .data import DataError
from .experiments import RUNNERS
from .idx import IdxParseError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("arguments", message)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="studentflow", description="Normalizing flows with fat-tailed base distributions.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "fig1": "penalty and influence curves of the three base families",
        "train": "train a single flow",
        "stability": "Gaussian vs. Student-t base training stability matrix",
        "grid": "clean/contaminated train x test grid over nu",
    }
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", metavar="PATH", help="JSON config file")
        p.add_argument("--seed", type=int, help="top-level seed")
        p.add_argument("--out", metavar="DIR", help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dotted path (repeatable)")
    return parser


def _fail(kind: str, message: str, code: int, **extra) -> int:
    print(json.dumps({"error": kind, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed", f"must be non-negative, got {args.seed}")
        file_cfg = load_config_file(args.config) if args.config else None
        cfg = resolve_config(args.command, file_cfg, args.overrides, args.seed, args.out)
        report = RUNNERS[args.command](cfg)
    except ConfigError as err:
        return _fail("config", str(err), EXIT_CONFIG, field=err.field)
    except IdxParseError as err:
        return _fail("data", str(err), EXIT_DATA, offset=err.offset)
    except (DataError, CheckpointError, OSError) as err:
        return _fail("data", str(err), EXIT_DATA)
    summary = {"out": report["out"], "diverged": report["diverged"]}
    print(json.dumps(summary))
    return EXIT_DIVERGED if report["diverged"] else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
