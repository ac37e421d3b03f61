"""
BASEN Toolkit - Main Entry Point
Command-line interface for brain-assisted speech enhancement with EEG channel selection.
"""

import argparse
import json
import logging
import os
import sys

# Add the project root to the Python path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from src.backend.config_manager import RUN_ROOT_ENV, ConfigManager, load_run_config
from src.backend.errors import BasenError
from src.cli.commands import METHODS, cmd_eval, cmd_preprocess, cmd_report, cmd_select, cmd_synth, cmd_train

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
EXIT_BASEN_ERROR = 2
EXIT_UNEXPECTED = 1


def _keys_epilog() -> str:
    lines = ["configuration keys (--set key=value, JSON values):"]
    lines.extend(f"  {key} = {json.dumps(value)}" for key, value in ConfigManager.describe_keys())
    lines.append(f"\nenvironment: {RUN_ROOT_ENV} names the default run root (default 'runs').")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline step."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key, e.g. --set schedule.total_epochs=5")
    common.add_argument("--seed", type=int, help="global seed (also seeds the synthetic corpus)")
    common.add_argument("--run-dir", help="run directory (default: $%s/<method>-seed<seed>)" % RUN_ROOT_ENV)
    common.add_argument("--data-dir", help="dataset root holding raw/, filtered/ and mua/")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="disable progress bars")

    parser = argparse.ArgumentParser(
        prog="basen",
        description="Brain-assisted speech enhancement with sparse EEG channel selection.",
        epilog=_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="generate the synthetic planted-channel corpus")
    synth.add_argument("--out", help="output dataset directory (default <data_dir>/raw)")

    prep = sub.add_parser("preprocess", parents=[common], help="filter, MUA and segment a dataset")
    prep.add_argument("--in", dest="in_dir", help="input dataset (default <data_dir>/raw)")
    prep.add_argument("--out", help="output dataset (default <data_dir>/<stage>)")

    train = sub.add_parser("train", parents=[common], help="train a model")
    train.add_argument("--method", required=True, choices=METHODS)
    train.add_argument("--dataset", help="dataset directory (default: most processed stage)")
    train.add_argument("--pretrained", help="pre-trained BASEN checkpoint for resgs")

    select = sub.add_parser("select", parents=[common], help="extract the channel subset of a finished run")
    select.add_argument("run", help="run directory")

    ev = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--subset", help="ChannelSubset JSON; other channels are zeroed")
    ev.add_argument("--out", help="summary JSON path (default <run_dir>/eval.json)")
    ev.add_argument("--seg-len-s", type=float, help="cut longer examples into segments of this length")

    report = sub.add_parser("report", parents=[common], help="channel maps, summaries and figures of a run")
    report.add_argument("run", help="run directory")
    report.add_argument("--compare", nargs="*", default=[], help="other run directories for the curve plot")
    report.add_argument("--layout", help="channel layout CSV (channel_index,label,x,y)")
    return parser


def run(args: argparse.Namespace) -> dict:
    """Dispatch a parsed command line."""
    # select and report read the run's own config snapshot
    if args.command == "select":
        return cmd_select(args.run)
    if args.command == "report":
        return cmd_report(args.run, args.compare, args.layout)

    manager, cfg = load_run_config(args.config, args.overrides, seed=args.seed,
                                   run_dir=args.run_dir, data_dir=args.data_dir)
    if args.command == "synth":
        return cmd_synth(manager, cfg, args.out)
    if args.command == "preprocess":
        return cmd_preprocess(manager, cfg, args.in_dir, args.out)
    if args.command == "train":
        return cmd_train(manager, cfg, args.method, args.dataset, args.pretrained, args.quiet)
    return cmd_eval(args.checkpoint, args.dataset, args.subset, args.out, args.seg_len_s,
                    cfg.evaluation.write_xlsx, cfg.device)


def _error_line(error: Exception) -> str:
    return json.dumps({
        "error": type(error).__name__,
        "message": str(error),
        "keys": list(getattr(error, "keys", None) or []),
    })


def main(argv=None) -> int:
    """Main entry point for the BASEN toolkit."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        result = run(args)
    except BasenError as e:
        logger.debug("Command failed", exc_info=True)
        print(_error_line(e), file=sys.stderr)
        return EXIT_BASEN_ERROR
    except Exception as e:
        logger.debug("Unexpected failure", exc_info=True)
        print(_error_line(e), file=sys.stderr)
        return EXIT_UNEXPECTED
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
