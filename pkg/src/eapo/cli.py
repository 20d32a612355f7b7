"""Command line entry point: ``eapo {synth,pretrain,adapt,eval,run-all,verify}``.

Log verbosity comes from ``EAPO_LOG_LEVEL`` (default WARNING). Diagnostics
go to stderr; stdout only carries the path of what a command produced.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from eapo.config import ConfigError, ExperimentConfig, load_config
from eapo.data import DataError
from eapo.pipeline import Run, StageError, verify_manifest
from eapo.training import TrainingError

log = logging.getLogger("eapo")


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON experiment config (or a run manifest)")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int, help="override every seed (data, model, both stages)")
    common.add_argument("--k", type=int, help="override the neighbourhood size")
    common.add_argument("--mode", choices=["eapo", "sft-only"], help="fine-tuning mode")
    common.add_argument("--force", action="store_true", help="recompute stages even if outputs exist")

    parser = argparse.ArgumentParser(prog="eapo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic train/test tables")
    sub.add_parser("pretrain", parents=[common], help="ERM pretraining")
    sub.add_parser("adapt", parents=[common], help="retrieve the local manifold and fine-tune")
    sub.add_parser("eval", parents=[common], help="threshold on train, report on test")
    sub.add_parser("run-all", parents=[common], help="all stages, then write the run manifest")
    v = sub.add_parser("verify", help="check every artifact hash recorded in a manifest")
    v.add_argument("manifest")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig.from_dict({})
    return cfg.with_overrides(seed=args.seed, k=args.k, mode=args.mode, out=args.out)


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("EAPO_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            bad = verify_manifest(args.manifest)
            for rel in bad:
                print(f"mismatch: {rel}", file=sys.stderr)
            return 1 if bad else 0

        run = Run(_config(args), force=args.force)
        if args.command == "synth":
            result = run.synth()
        elif args.command == "pretrain":
            result = run.run_pretrain()
        elif args.command == "adapt":
            result = run.run_adapt()
        elif args.command == "eval":
            result = run.run_eval()
        else:
            result = run.run_all()
        print(result)
        return 0
    except (ConfigError, DataError, StageError, TrainingError, OSError, ValueError) as exc:
        print(f"eapo {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
