"""Argument handler for this project."""

from argparse import ArgumentParser, Namespace, _HelpAction
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

from stegpurify._util import CONFIG, RawFormatter

COMMANDS = {
    "train-hiding": "Train every hiding scheme (and the AE noise layer when needed)",
    "train-ae": "Pre-train the autoencoder noise layer",
    "train-ebra": "Train the EBRA ensembles used by the attacks and the k sweep",
    "attack": "Apply one configured attack to image files",
    "evaluate": "Report metrics for containers attacked elsewhere",
    "grid": "Run every attack against every scheme and write tables and figures",
    "sweep-k": "Evaluate EBRA for several tile sides",
    "bench": "Time every attack per image",
    "report": "Re-render tables from stored rows",
}


class HelpAndCustom(_HelpAction):
    """Help action that prints the help text and then runs custom logic."""

    def __call__(self, parser, namespace, values, option_string=None):
        parser.print_help()
        CONFIG.show_config()
        parser.exit()


def get_version() -> str:
    """Lazy import of package version to speed up CLI loading."""
    from importlib.metadata import (  # pylint: disable=import-outside-toplevel
        PackageNotFoundError,
        version,
    )

    try:
        return version("dml-stegpurify")
    except PackageNotFoundError:
        return "unknown"


@dataclass
class ParsedArgs:  # pylint: disable=too-many-instance-attributes
    """Parsed command-line arguments for the experiment CLI."""

    command: str
    verbose: bool = False
    config: Path | None = None
    overrides: List[str] = field(default_factory=list)
    device: str | None = None
    attack: str | None = None
    scheme: str | None = None
    input_path: Path | None = None
    output_path: Path | None = None
    before: Path | None = None
    after: Path | None = None
    k_values: List[int] = field(default_factory=list)
    images: int | None = None


class CustomArgumentParser(ArgumentParser):
    """Custom ArgumentParser with overridden error method."""

    def error(self, message):
        """Override default error method to add a leading newline."""
        self.print_usage()
        self.exit(2, f"\nerror: {message}\n")


class ArgumentHandler:
    """Class for handling command-line arguments."""

    def __init__(self):
        self.parser = self._make_cmd_line_parser()

    @staticmethod
    def _common_options() -> ArgumentParser:
        common = ArgumentParser(add_help=False)
        common.add_argument(
            "-v", "--verbose", action="store_true", default=False, help="Verbose output"
        )
        common.add_argument("-c", "--config", default=None, help="Experiment TOML file")
        common.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override an experiment key, e.g. --set ebra.train.k=24",
        )
        common.add_argument(
            "--device", default=None, help=f"auto, cpu, cuda or mps (default: {CONFIG.device})"
        )
        return common

    def _make_cmd_line_parser(self) -> ArgumentParser:
        parser = CustomArgumentParser(
            prog="stegpurify",
            description="Train deep hiding schemes and measure how removal attacks defeat them",
            formatter_class=RawFormatter,
            add_help=False,
        )
        parser.add_argument(
            "-h",
            "--help",
            action=HelpAndCustom,
            help="show this help message and the resolved settings",
        )
        parser.add_argument(
            "-V",
            "--version",
            action="version",
            version=get_version(),
            help="Print the version number",
        )
        common = self._common_options()
        commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
        sub = {
            name: commands.add_parser(
                name, help=text, description=text, parents=[common], formatter_class=RawFormatter
            )
            for name, text in COMMANDS.items()
        }

        sub["attack"].add_argument("--attack", required=True, help="Attack name in the config")
        sub["attack"].add_argument("--in", dest="input_path", required=True, help="Image or dir")
        sub["attack"].add_argument("--out", dest="output_path", required=True, help="PNG or dir")
        sub["attack"].add_argument("--scheme", default=None, help="Scheme queried by NES")

        sub["evaluate"].add_argument("--scheme", required=True, help="Scheme name in the config")
        sub["evaluate"].add_argument("--before", required=True, help="Directory of containers")
        sub["evaluate"].add_argument("--after", required=True, help="Directory of attacked images")
        sub["evaluate"].add_argument(
            "--attack", default="external", help="Attack label for the report row"
        )

        sub["sweep-k"].add_argument(
            "--k", dest="k_values", type=int, nargs="+", default=[], help="Tile sides"
        )
        sub["sweep-k"].add_argument("--scheme", default=None, help="Scheme to attack")

        sub["bench"].add_argument(
            "--images", type=int, default=None, help="Images timed per attack (default 100)"
        )
        return parser

    def parse_args(self) -> ParsedArgs:
        """Parse the command-line arguments from sys.argv."""
        return self._parse(self.parser.parse_args())

    def parse_args_from(self, argv: Sequence[str]) -> ParsedArgs:
        """Parse arguments from a provided argument list (for testing)."""
        return self._parse(self.parser.parse_args(argv))

    def _parse(self, args: Namespace) -> ParsedArgs:
        """Convert Namespace to ParsedArgs dataclass."""

        def path(name: str) -> Path | None:
            value = getattr(args, name, None)
            return Path(value) if value else None

        images = getattr(args, "images", None)
        if images is not None and images < 1:
            self.parser.error("--images must be at least 1")
        return ParsedArgs(
            command=args.command,
            verbose=args.verbose,
            config=path("config"),
            overrides=list(args.overrides),
            device=args.device,
            attack=getattr(args, "attack", None),
            scheme=getattr(args, "scheme", None),
            input_path=path("input_path"),
            output_path=path("output_path"),
            before=path("before"),
            after=path("after"),
            k_values=list(getattr(args, "k_values", [])),
            images=images,
        )
