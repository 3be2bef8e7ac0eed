"""``poisonbench`` command-line interface.

    poisonbench {synth|train|attack|eval|sweep|ablate|deviation}
                [--config FILE] [--<key> VALUE ...] [--jobs N]

Any experiment-config key can be overridden with a flag of the same name.
Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback

from . import harness
from .harness import ConfigError, ExperimentConfig, parse_config


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisonbench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "train", "attack", "eval", "sweep", "deviation"):
        cmd = sub.add_parser(name)
        _add_common(cmd)
    ablate = sub.add_parser("ablate")
    ablate.add_argument("--kind", choices=("hs", "risk"), required=True)
    _add_common(ablate)
    return parser


def _add_common(cmd: argparse.ArgumentParser) -> None:
    cmd.add_argument("--config", default=None, help="key=value experiment config file")
    import dataclasses

    for field in dataclasses.fields(ExperimentConfig):
        cmd.add_argument(f"--{field.name}", default=None, help=argparse.SUPPRESS)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    overrides = {
        k: v
        for k, v in vars(args).items()
        if k not in ("command", "config", "kind") and v is not None
    }
    try:
        cfg = parse_config(args.config, overrides)
        if args.command == "synth":
            harness.cmd_synth(cfg)
        elif args.command == "train":
            harness.cmd_train(cfg)
        elif args.command == "attack":
            harness.cmd_attack(cfg)
        elif args.command == "eval":
            harness.cmd_eval(cfg)
        elif args.command == "sweep":
            harness.cmd_sweep(cfg)
        elif args.command == "ablate":
            harness.cmd_ablate(cfg, args.kind)
        elif args.command == "deviation":
            harness.cmd_deviation(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception:  # runtime failure
        traceback.print_exc()
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
