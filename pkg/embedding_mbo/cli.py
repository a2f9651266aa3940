import argparse
import sys
from pathlib import Path
from typing import Sequence

from embedding_mbo.components import harness
from embedding_mbo.core.errors import DataError
from embedding_mbo.core.errors import DropError
from embedding_mbo.core.settings import load_config
from embedding_mbo.core.settings import logger

COMMANDS = ("train", "eval", "finetune-ckpt", "finetune-embed", "fbc", "gen-data", "distill")


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drop", description="Offline RL by task decomposition and test-time embedding search."
    )
    parser.add_argument("command", choices=COMMANDS, help="What to run.")
    parser.add_argument("--config", help="Path to a section.key=value config file.")
    parser.add_argument("--seed", type=int, help="Overrides train.seed.")
    parser.add_argument("--out", help="Overrides output_dir.")
    parser.add_argument("--checkpoints", nargs="+", help="Checkpoint files for eval (default: the run's own).")
    parser.add_argument("--k-max", type=int, help="Overrides finetune.k_max for finetune-embed.")
    return parser


def run(args: argparse.Namespace) -> int:
    config = load_config(args.config, {"train.seed": args.seed, "output_dir": args.out})
    if args.command == "train":
        result = harness.cmd_train(config)
        logger.info(f"Training finished with {len(result.checkpoints)} checkpoints")
    elif args.command == "eval":
        paths = [Path(p) for p in args.checkpoints] if args.checkpoints else None
        metrics, missing = harness.cmd_eval(config, paths)
        logger.info(f"Metrics written to: {metrics}")
        if missing:
            logger.error(f"{len(missing)} checkpoints were missing: {', '.join(map(str, missing))}")
            return DataError.exit_code
    elif args.command == "finetune-ckpt":
        selection = harness.cmd_finetune_checkpoint(config)
        print(selection.checkpoint_id)
    elif args.command == "finetune-embed":
        selection = harness.cmd_finetune_embedding(config, k_max=args.k_max)
        print(selection.checkpoint_id, selection.k)
    elif args.command == "fbc":
        logger.info(f"F-BC metrics written to: {harness.cmd_baseline_fbc(config)}")
    elif args.command == "gen-data":
        logger.info(f"Dataset written to: {harness.cmd_gen_data(config)}")
    elif args.command == "distill":
        logger.info(f"Distilled-policy metrics written to: {harness.cmd_distill(config)}")
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        return run(args)
    except DropError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except FileNotFoundError as e:
        logger.error(str(e))
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
