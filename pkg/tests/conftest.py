"""Shared fixtures: natural-looking image batches, PNG cover datasets and tiny models."""

import logging
from pathlib import Path

import pytest
import torch
import torchvision.transforms.functional as TF

from stegpurify._util import CONFIG
from stegpurify.ebra import EbraEnsemble, build_ebra_ensemble
from stegpurify.hiding import HidingPair, build_hiding_pair
from stegpurify.image_core import save_image

TINY_WIDTH = 0.0625


def natural_images(
    batch: int = 4, channels: int = 3, size: int = 64, seed: int = 0
) -> torch.Tensor:
    """Smooth random fields with a gradient, stretched to [0, 1]; stand-ins for photos."""
    generator = torch.Generator().manual_seed(seed)
    noise = torch.rand((batch, channels, size, size), generator=generator)
    smooth = TF.gaussian_blur(noise, kernel_size=[9, 9], sigma=[3.0, 3.0])
    ramp = torch.linspace(0.0, 1.0, size).view(1, 1, 1, size)
    images = smooth + 0.3 * ramp
    low = images.amin(dim=(1, 2, 3), keepdim=True)
    high = images.amax(dim=(1, 2, 3), keepdim=True)
    return ((images - low) / (high - low)).clamp(0.0, 1.0)


def write_covers(root: Path, count: int = 12, size: int = 64, seed: int = 0) -> Path:
    """Write ``count`` PNG covers into ``root``."""
    root.mkdir(parents=True, exist_ok=True)
    for i, image in enumerate(natural_images(count, 3, size, seed)):
        save_image(image, root / f"cover_{i:03d}.png")
    return root


@pytest.fixture(name="covers")
def covers_fixture() -> torch.Tensor:
    """Four 64x64 RGB covers."""
    return natural_images(4, 3, 64, seed=1)


@pytest.fixture(name="cover_dir")
def cover_dir_fixture(tmp_path: Path) -> Path:
    """Directory holding twelve 64x64 PNG covers."""
    return write_covers(tmp_path / "covers")


@pytest.fixture(name="tiny_pair")
def tiny_pair_fixture() -> HidingPair:
    """Untrained UDH pair with four-channel layers."""
    torch.manual_seed(0)
    return build_hiding_pair("UDH", 64, secret_channels=3, width_scale=TINY_WIDTH).eval()


@pytest.fixture(name="tiny_ensemble")
def tiny_ensemble_fixture() -> EbraEnsemble:
    """Untrained EBRA ensemble for 64x64 images, k=16 and d=1."""
    torch.manual_seed(0)
    return build_ebra_ensemble(64, 16, 1, channels=3, base=4).eval()


@pytest.fixture(autouse=True)
def reset_app_logger():
    """Undo setup_logger so records keep reaching caplog in later tests."""
    yield
    logger = logging.getLogger(CONFIG.app)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.propagate = True
    logger.setLevel(logging.NOTSET)
