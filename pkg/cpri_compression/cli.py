import argparse
import json
import logging
import sys
from logging import getLogger
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Type

from cpri_compression import harness
from cpri_compression.exceptions import CpriCompressionError
from cpri_compression.neural_core import configure_threads
from cpri_compression.options import RunOptions, _merge, load_run_options

logger = getLogger("cpri-compression")

_VERBOSITY = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG}


def _selection(arguments: argparse.Namespace) -> Dict[str, int]:
    selection = {}
    if getattr(arguments, "layers", None) is not None:
        selection["layers"] = arguments.layers
    if getattr(arguments, "rate", None) is not None:
        selection["rate"] = arguments.rate
    return selection


class Command:
    help = ""

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    def handle(self, opts: RunOptions, arguments: argparse.Namespace) -> None:
        raise NotImplementedError


class GenDatasetCommand(Command):
    help = "Generate seeded train/val/test frame files, plus test sets for every mismatch scenario"

    def add_arguments(self, parser):
        parser.add_argument("--split", action="append", choices=harness.SPLITS, help="only these splits")
        parser.add_argument("--no-mismatch", action="store_true", help="skip the mismatch scenario test sets")
        parser.add_argument("--matched", action="store_true", help="also emit train/val sets per mismatch scenario")

    def handle(self, opts, arguments):
        if arguments.split:
            written = harness.generate_dataset(opts, arguments.split)
        elif arguments.no_mismatch:
            written = harness.generate_dataset(opts)
        else:
            written = harness.generate_all_datasets(opts, arguments.matched)
        for name, path in written.items():
            print(f"{name}\t{path}")


class TrainCommand(Command):
    help = "Train one bundle per grid point of the selected schemes"

    def add_arguments(self, parser):
        parser.add_argument("--scheme", action="append", help="scheme to train (repeatable, default: sweep.schemes)")
        parser.add_argument("--mismatch", default="", help="train on the named mismatch scenario's data instead")

    def handle(self, opts, arguments):
        data_opts = harness.mismatch_options(opts, arguments.mismatch) if arguments.mismatch else opts
        schemes = arguments.scheme or opts["sweep"]["schemes"]
        for path in harness.train_grid(data_opts, schemes, arguments.mismatch):
            print(path)


class EncodeCommand(Command):
    help = "Encode a frame file into a stream file with a trained bundle"

    def add_arguments(self, parser):
        parser.add_argument("--bundle", type=Path, required=True)
        parser.add_argument("--layers", type=int, help="refinement layers to emit")
        parser.add_argument("--rate", type=int, help="variable-rate index")
        parser.add_argument("source", type=Path)
        parser.add_argument("target", type=Path)

    def handle(self, opts, arguments):
        harness.encode_file(opts, arguments.bundle, arguments.source, arguments.target, **_selection(arguments))


class DecodeCommand(Command):
    help = "Decode a stream file back into a frame file"

    def add_arguments(self, parser):
        parser.add_argument("--bundle", type=Path, required=True)
        parser.add_argument("source", type=Path)
        parser.add_argument("target", type=Path)

    def handle(self, opts, arguments):
        frames = harness.decode_file(opts, arguments.bundle, arguments.source, arguments.target)
        print(f"{len(frames)} frames of {frames.shape[1]} samples written to {arguments.target}")


class EvaluateCommand(Command):
    help = "Rate and EVM of one bundle over a dataset split"

    def add_arguments(self, parser):
        parser.add_argument("--bundle", type=Path, required=True)
        parser.add_argument("--split", default="test", choices=harness.SPLITS)
        parser.add_argument("--mismatch", default="", help="evaluate on the named mismatch scenario's data")
        parser.add_argument("--layers", type=int)
        parser.add_argument("--rate", type=int)

    def handle(self, opts, arguments):
        row = harness.evaluate_bundle(
            opts, arguments.bundle, arguments.split, arguments.mismatch, **_selection(arguments)
        )
        print(json.dumps(row.__dict__, indent=2))


class SweepCommand(Command):
    help = "Evaluate every trained grid point and write the rate-distortion CSV and SVG"

    def add_arguments(self, parser):
        parser.add_argument("--scheme", action="append")

    def handle(self, opts, arguments):
        rows = harness.sweep(opts, arguments.scheme)
        print(f"{len(rows)} rows written to {harness.report_path(opts, 'csv')}")


class CovcheckCommand(Command):
    help = "Compare the empirical covariance of decimated downlink frames with its closed form"

    def add_arguments(self, parser):
        parser.add_argument("--frames", type=int, help="frames to estimate from (default: dataset.train_frames)")

    def handle(self, opts, arguments):
        report = harness.covcheck(opts, arguments.frames)
        print(
            f"frames {report.frames}: relative Frobenius error {report.rel_frobenius_error:.4f}, "
            f"circulant {report.circulant_rel_error:.4f}, mean deviation {report.mean_deviation_rms:.3f}, "
            f"excess kurtosis {report.excess_kurtosis:.3f}, neighbour correlation {report.neighbour_correlation:.3f}"
        )


class InspectBundleCommand(Command):
    help = "Print a bundle's metadata and parameter counts per component"

    def add_arguments(self, parser):
        parser.add_argument("bundle", type=Path)

    def handle(self, opts, arguments):
        print(json.dumps(harness.describe_bundle(arguments.bundle), indent=2, default=str))


COMMANDS: Dict[str, Type[Command]] = {
    "gen-dataset": GenDatasetCommand,
    "train": TrainCommand,
    "encode": EncodeCommand,
    "decode": DecodeCommand,
    "evaluate": EvaluateCommand,
    "sweep": SweepCommand,
    "covcheck": CovcheckCommand,
    "inspect-bundle": InspectBundleCommand,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpri-compression", description="CPRI fronthaul compression toolkit")
    parser.add_argument("--config", type=Path, help="TOML run configuration (default: built-in downlink settings)")
    parser.add_argument("--deterministic", action="store_true", help="single thread, deterministic algorithms")
    parser.add_argument("-v", "--verbosity", action="count", default=1)
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, command_class in COMMANDS.items():
        command = command_class()
        subparser = subparsers.add_parser(name, help=command.help, description=command.help)
        command.add_arguments(subparser)
        subparser.set_defaults(handler=command)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    arguments = build_parser().parse_args(argv)
    logging.basicConfig(
        level=_VERBOSITY.get(arguments.verbosity, logging.DEBUG), format="%(asctime)s %(levelname)s %(message)s"
    )
    try:
        opts = load_run_options(arguments.config)
        if arguments.deterministic:
            opts = _merge(source={"deterministic": True}, into=opts)
        configure_threads(opts["deterministic"], opts["seed"])
        arguments.handler.handle(opts, arguments)
    except (CpriCompressionError, OSError) as e:
        logger.error(str(e))
        return 1
    return 0


def run(argv: Optional[List[str]] = None) -> None:
    sys.exit(main(argv))
