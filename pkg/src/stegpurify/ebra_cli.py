#!/usr/bin/env python3
"""Command-line purifier: ``ebra purify --in <png|dir> --out <png|dir> --ensemble <ckpt>``.

Reads 8-bit images, erases and repairs them with a trained ensemble and writes PNGs.
"""

import logging
import sys
from argparse import ArgumentParser
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import torch

from stegpurify._util import RawFormatter, StegPurifyError, select_device, setup_logger
from stegpurify.argument_handler import CustomArgumentParser
from stegpurify.ebra import ebra_purify, load_ebra_ensemble
from stegpurify.image_core import load_image, output_pairs, save_image

logger = logging.getLogger(__name__)


@dataclass
class PurifyArgs:
    """Parsed ``ebra purify`` arguments."""

    input_path: Path
    output_path: Path
    ensemble: Path
    k: int | None
    d: int | None
    batch_passes: bool
    device: str | None
    verbose: bool


def make_parser() -> ArgumentParser:
    """Parser for the ``ebra`` command."""
    parser = CustomArgumentParser(
        prog="ebra",
        description="Purify container images by erasing and repairing tiles",
        formatter_class=RawFormatter,
    )
    commands = parser.add_subparsers(dest="command", required=True)
    purify = commands.add_parser("purify", help="Purify one image or a directory of images")
    purify.add_argument("--in", dest="input_path", required=True, help="Image file or directory")
    purify.add_argument("--out", dest="output_path", required=True, help="PNG file or directory")
    purify.add_argument("--ensemble", required=True, help="ebra_ensemble checkpoint")
    purify.add_argument("--k", type=int, default=None, help="Tile side (default: trained k)")
    purify.add_argument("--d", type=int, default=None, help="Tile gap (default: trained d)")
    purify.add_argument(
        "--sequential", action="store_true", help="Repair passes one at a time"
    )
    purify.add_argument("--device", default=None, help="auto, cpu, cuda or mps")
    purify.add_argument("-v", "--verbose", action="store_true", default=False)
    return parser


def parse_args_from(argv: Sequence[str]) -> PurifyArgs:
    """Parse ``ebra`` arguments from a list."""
    args = make_parser().parse_args(argv)
    return PurifyArgs(
        input_path=Path(args.input_path),
        output_path=Path(args.output_path),
        ensemble=Path(args.ensemble),
        k=args.k,
        d=args.d,
        batch_passes=not args.sequential,
        device=args.device,
        verbose=args.verbose,
    )


def purify_files(args: PurifyArgs) -> List[Path]:
    """Purify every input image and return the written paths."""
    device = select_device(args.device)
    ensemble = load_ebra_ensemble(args.ensemble, device)
    if args.k is not None:
        ensemble.k = args.k
    if args.d is not None:
        ensemble.d = args.d
    written = []
    for src, dst in output_pairs(args.input_path, args.output_path):
        image = load_image(src, channels=ensemble.channels)[None].to(device)
        purified = ebra_purify(ensemble, image, batch_passes=args.batch_passes)
        written.append(save_image(purified.cpu(), dst))
        logger.info("Purified %s -> %s", src, dst)
    return written


def main(argv: Sequence[str] | None = None) -> None:
    """Entry point for the ``ebra`` console script."""
    args = parse_args_from(sys.argv[1:] if argv is None else argv)
    setup_logger(args.verbose)
    try:
        with torch.inference_mode():
            written = purify_files(args)
    except StegPurifyError as e:
        print(e)
        sys.exit(e.exit_code)
    print(f"Wrote {len(written)} purified image(s)")


if __name__ == "__main__":
    main()
