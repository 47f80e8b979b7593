"""Command-line entry point: ``antiforge <subcommand> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Sequence

from .harness import config as hc
from .harness import experiments as ex

EXPERIMENTS = {
    "effectiveness": ex.run_effectiveness,
    "robustness": ex.run_robustness,
    "reconstruction": ex.run_reconstruction,
    "transfer": ex.run_transfer,
    "colorspace": ex.run_colorspace,
    "ablate": ex.run_magnitude_ablation,
    "spectra": ex.emit_spectra,
}


def _global_flags(default) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=default,
                        help="YAML experiment config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, metavar="N", default=default, help="master seed; overrides the config")
    common.add_argument("--out", metavar="DIR", default=default, help="output directory; overrides the config")
    common.add_argument("-v", "--verbose", action="store_true",
                        default=False if default is None else default)
    return common


def _parser() -> argparse.ArgumentParser:
    # Flags are accepted before or after the subcommand; the subcommand copy
    # must not overwrite a value given before it.
    common = _global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="antiforge", description=__doc__, parents=[_global_flags(None)])
    sub = parser.add_subparsers(dest="command", required=True)
    protect = sub.add_parser("protect", parents=[common], help="write protected PNGs with sidecar JSON")
    protect.add_argument("inputs", nargs="+", help="image files or directories")
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common], help=f"run the {name} experiment")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = hc.load_config(args.config, seed=args.seed, out_dir=args.out)
    except hc.ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2

    if args.command == "protect":
        written, errors = ex.protect_images(cfg, args.inputs, cfg.out_dir)
        for msg in errors:
            print(f"error: {msg}", file=sys.stderr)
        print(f"protected {len(written)} image(s) into {cfg.out_dir}")
        return 1 if errors else 0

    EXPERIMENTS[args.command](cfg)
    print(f"{args.command}: results in {cfg.out_dir / ('ablation' if args.command == 'ablate' else args.command)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
