import argparse
import logging
import sys

from controls.commands import (SOURCE_PRESETS, cmd_evaluate, cmd_gen_data, cmd_pretrain_base,
                               cmd_specify_target, cmd_train_source, cmd_verify)
from controls.progress import Progress
from controls.settingsmanager import SettingsManager
from controls.suites import SUITES, cmd_suite
from modules.errors import TransCoderError

logger = logging.getLogger("transcoder")


def build_parser():
    """ Argument parser with one sub-command per verb. """
    parser = argparse.ArgumentParser(
        prog="transcoder",
        description="Knowledge-prefix transfer between code tasks on a toy "
                    "encoder-decoder.")
    parser.add_argument("--config", default=None,
                        help="experiment config (default: config/settings.json)")
    parser.add_argument("--output-dir", default=None, help="override output_dir")
    parser.add_argument("--seeds", default=None,
                        help="comma separated seeds overriding the config")
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="hide progress bars")
    verbs = parser.add_subparsers(dest="verb", required=True)

    gen = verbs.add_parser("gen-data", help="generate the mini-language corpora")
    gen.add_argument("--force", action="store_true", help="overwrite existing data")

    verbs.add_parser("pretrain-base", help="denoising pass producing the base backbone")

    source = verbs.add_parser("train-source", help="source task training of the prefix")
    source.add_argument("--tasks", help="comma separated source task ids")
    source.add_argument("--preset", choices=sorted(SOURCE_PRESETS))
    source.add_argument("--order", help="fixed visit order, comma separated task ids")
    source.add_argument("--name", help="output name under source/")
    source.add_argument("--seed", type=int)

    target = verbs.add_parser("specify-target", help="target task specification")
    choice = target.add_mutually_exclusive_group(required=True)
    choice.add_argument("--prefix", help="prefix checkpoint from train-source")
    choice.add_argument("--random-prefix", action="store_true",
                        help="use a randomly initialized prefix (ablation)")
    target.add_argument("--rate", type=float, help="low-resource train subsample rate")
    target.add_argument("--task", help="target task id (default: target.task)")
    target.add_argument("--name", help="output name under target/")
    target.add_argument("--seed", type=int)

    evaluate = verbs.add_parser("evaluate", help="score a saved model on a task split")
    evaluate.add_argument("--backbone", required=True)
    evaluate.add_argument("--prefix")
    evaluate.add_argument("--task")
    evaluate.add_argument("--split", default="test", choices=["train", "dev", "test"])

    suite = verbs.add_parser("suite", help="run an experiment suite")
    suite.add_argument("name", choices=SUITES)

    verbs.add_parser("verify", help="check digests, corpora and config fingerprints")
    return parser


def run(args):
    """ Dispatches the parsed arguments; returns the exit code. """
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    config = SettingsManager.load(args.config).with_overrides(output_dir=args.output_dir,
                                                             seeds=seeds)
    progress = Progress(disable=args.quiet)
    try:
        if args.verb == "gen-data":
            for directory in cmd_gen_data(config, force=args.force):
                print(directory)
        elif args.verb == "pretrain-base":
            print(cmd_pretrain_base(config, progress=progress))
        elif args.verb == "train-source":
            print(cmd_train_source(config, tasks=args.tasks, order=args.order,
                                   preset=args.preset, name=args.name, seed=args.seed,
                                   progress=progress))
        elif args.verb == "specify-target":
            print(cmd_specify_target(config, prefix_path=args.prefix,
                                     random_prefix=args.random_prefix, rate=args.rate,
                                     task=args.task, name=args.name, seed=args.seed,
                                     progress=progress))
        elif args.verb == "evaluate":
            cmd_evaluate(config, backbone_path=args.backbone, prefix_path=args.prefix,
                         task=args.task, split=args.split)
        elif args.verb == "suite":
            print(cmd_suite(config, args.name, progress=progress))
        elif args.verb == "verify":
            print(f"{cmd_verify(config)} artifacts verified")
    finally:
        progress.close()
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except TransCoderError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code


# --------------------------------
# COMMAND LINE ENTRY POINT
# --------------------------------
if __name__ == "__main__":
    sys.exit(main())
