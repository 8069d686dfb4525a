"""Command-line entry point: ``adasc {pretrain,adapt,evaluate,synth,features}``."""
from __future__ import annotations

import argparse
import logging
import sys

from .experiment import ConfigError, RunConfig, load_config, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adasc", description="Unsupervised adversarial domain adaptation.")
    sub = parser.add_subparsers(dest="mode", required=True)
    helps = {
        "pretrain": "fit source mapper + label classifier",
        "adapt": "adversarially adapt a target mapper from a pretrain checkpoint",
        "evaluate": "score checkpoints on the test split",
        "synth": "run the full pipeline on a synthetic domain pair",
        "features": "extract log mel-band energies for every clip in a manifest",
    }
    for mode, text in helps.items():
        p = sub.add_parser(mode, help=text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory (default: $ADASC_OUT_ROOT/<mode>-<digest>)")
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--checkpoint", help="directory holding pretrain.ckpt / adapted.ckpt")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
    except ConfigError as exc:
        logging.error("%s", exc)
        return 2
    cfg.mode = args.mode
    if args.seed is not None:
        if args.seed < 0:
            logging.error("--seed must be non-negative")
            return 2
        cfg.seed = args.seed
    if args.out:
        cfg.out = args.out
    if args.precision:
        cfg.precision = args.precision
    if args.checkpoint:
        cfg.checkpoint = args.checkpoint
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
