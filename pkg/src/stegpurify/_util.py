"""Utility classes and functions"""

import argparse
import logging
import random
import textwrap
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path

import numpy as np
import torch
from platformdirs import user_log_dir

from stegpurify.config import StegPurifyConfig

logging.getLogger("PIL").setLevel(logging.ERROR)
logging.getLogger("matplotlib").setLevel(logging.ERROR)
# Load config once only and make it available throughout the application
CONFIG = StegPurifyConfig()


class StegPurifyError(Exception):
    """Custom exception with exit code for controlled termination."""

    def __init__(self, message: str, exit_code: int = 1) -> None:
        super().__init__(message)
        self.exit_code = exit_code


class ConfigurationError(StegPurifyError):
    """Invalid or missing configuration."""

    def __init__(self, message: str) -> None:
        super().__init__(message, exit_code=2)


class ShapeError(StegPurifyError, ValueError):
    """Tensor shape or value-range contract violated."""


class GeometryError(StegPurifyError, ValueError):
    """Tiling, window or image geometry is invalid."""


class OutOfRangeIndexError(StegPurifyError, IndexError):
    """Pass or pixel index outside its valid range."""


class CheckpointError(StegPurifyError):
    """Checkpoint is unreadable, of the wrong kind or of an unknown format version."""


class StageError(StegPurifyError):
    """A pipeline stage is missing its inputs or failed."""


class TrainingDivergedError(StegPurifyError):
    """Loss became non-finite; a diagnostic checkpoint was written."""

    def __init__(self, message: str, checkpoint_path: Path | None = None) -> None:
        super().__init__(message, exit_code=3)
        self.checkpoint_path = checkpoint_path


class OracleError(StegPurifyError):
    """Black-box oracle raised; the partial result is kept."""

    def __init__(self, message: str, partial: torch.Tensor | None = None) -> None:
        super().__init__(message, exit_code=4)
        self.partial = partial


class RawFormatter(argparse.HelpFormatter):
    """Help formatter to split the text on newlines and indent each line"""

    def _fill_text(self, text, width, indent):
        """Split the text on newlines and indent each line"""
        return "\n".join(
            [
                textwrap.fill(line, width)
                for line in textwrap.indent(textwrap.dedent(text), indent).splitlines()
            ]
        )


def setup_logger(verbose: bool = False) -> logging.Logger:
    """Configure the rotating application log (and a console handler when verbose)."""
    log_dir = Path(user_log_dir()) / CONFIG.org / CONFIG.app
    log_dir.mkdir(parents=True, exist_ok=True)
    log_path = log_dir / "stegpurify.log"

    logger = logging.getLogger(CONFIG.app)
    if not logger.handlers:
        handler = TimedRotatingFileHandler(
            log_path, when="W0", interval=1, backupCount=5, encoding="utf-8"
        )
        formatter = logging.Formatter("[%(asctime)s] %(message)s", "%Y-%m-%d %H:%M:%S")
        handler.setFormatter(formatter)
        logger.addHandler(handler)
        logger.setLevel(logging.INFO)
        logger.propagate = False
    if verbose:
        console = logging.StreamHandler()
        console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(console)
        logger.setLevel(logging.DEBUG)
    return logger


def select_device(name: str | None = None) -> torch.device:
    """Resolve a device name; 'auto' prefers cuda, then mps, then cpu."""
    name = name or CONFIG.device
    if name != "auto":
        return torch.device(name)
    if torch.cuda.is_available():
        return torch.device("cuda")
    if torch.backends.mps.is_available():
        return torch.device("mps")
    return torch.device("cpu")


def seed_everything(seed: int) -> torch.Generator:
    """Seed python, numpy and torch; return a dedicated CPU generator."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)
