"""Tests for the erase-and-repair ensemble."""

import ast
from pathlib import Path

import pytest
import torch

import stegpurify
from stegpurify._util import ConfigurationError, GeometryError, ShapeError
from stegpurify.ebra import (
    EbraEnsemble,
    EbraTrainConfig,
    build_ebra_ensemble,
    ebra_purify,
    erase,
    load_ebra_ensemble,
    local_disc_depth,
    repair_pass,
    save_ebra_ensemble,
    train_ebra,
)
from stegpurify.image_core import load_dataset

from .conftest import natural_images

PACKAGE_DIR = Path(stegpurify.__file__).parent
BOX_FREE_MODULES = ["ebra.py", "ebra_models.py", "ebra_losses.py", "ebra_labels.py", "ebra_cli.py"]
HIDING_SIDE = {"hiding", "hiding_models", "noise_layers", "probes", "nes_attack", "harness"}


def imported_modules(path: Path) -> set:
    """Package-local module names imported by a source file."""
    names = set()
    for node in ast.walk(ast.parse(path.read_text(encoding="utf-8"))):
        if isinstance(node, ast.ImportFrom) and node.module:
            names.add(node.module.split(".")[-1])
            names.update(alias.name for alias in node.names)
        elif isinstance(node, ast.Import):
            names.update(alias.name.split(".")[-1] for alias in node.names)
    return names


@pytest.mark.parametrize("module", BOX_FREE_MODULES)
def test_purification_never_touches_the_hiding_side(module: str) -> None:
    """The purifier works from images alone."""
    assert not imported_modules(PACKAGE_DIR / module) & HIDING_SIDE


def test_build_checks_geometry() -> None:
    """Impossible tilings are refused before any network is built."""
    with pytest.raises(GeometryError):
        build_ebra_ensemble(64, 16, 4, base=4)
    with pytest.raises(GeometryError):
        build_ebra_ensemble(64, 65, 0, base=4)


def test_inpainting_only_variant_has_no_taps() -> None:
    """Without auxiliary generators there is nothing to fuse."""
    ensemble = build_ebra_ensemble(64, 16, 1, base=4, use_auxiliary=False)
    assert not ensemble.use_auxiliary
    assert ensemble.fusion_taps == ()
    assert set(ensemble.modules()) == {"inpainter"}


def test_erase_zeroes_exactly_the_mask(tiny_ensemble: EbraEnsemble, covers: torch.Tensor) -> None:
    """Masked pixels become 0 and the rest is untouched."""
    schedule = tiny_ensemble.schedule(64, 64)
    mask, masked = erase(covers, schedule, 1)
    assert mask.shape == (4, 1, 64, 64)
    assert torch.all(masked[mask.expand_as(covers) == 1] == 0)
    keep = mask.expand_as(covers) == 0
    assert torch.equal(masked[keep], covers[keep])
    with pytest.raises(ConfigurationError):
        erase(covers[..., :32, :32], schedule, 0)


def test_repair_pass_keeps_unmasked_pixels(
    tiny_ensemble: EbraEnsemble, covers: torch.Tensor
) -> None:
    """Compositing copies the masked container outside the mask."""
    mask, masked = erase(covers, tiny_ensemble.schedule(64, 64), 0)
    out = repair_pass(tiny_ensemble, covers, mask, masked)
    keep = mask.expand_as(covers) == 0
    assert torch.equal(out[keep], masked[keep].clamp(0.0, 1.0))
    with pytest.raises(ShapeError):
        repair_pass(tiny_ensemble, covers, mask[:, :, :32], masked)


def test_each_pixel_comes_from_the_pass_that_erased_it(
    tiny_ensemble: EbraEnsemble, covers: torch.Tensor
) -> None:
    """Purification equals the sum of masked repairs over all passes."""
    schedule = tiny_ensemble.schedule(64, 64)
    expected = torch.zeros_like(covers)
    for index in range(schedule.pass_count):
        mask, masked = erase(covers, schedule, index)
        expected += mask * repair_pass(tiny_ensemble, covers, mask, masked)
    out = ebra_purify(tiny_ensemble, covers)
    assert out.shape == covers.shape
    assert torch.allclose(out, expected, atol=1e-6)


def test_batched_passes_match_sequential(tiny_ensemble: EbraEnsemble, covers: torch.Tensor) -> None:
    """Stacking every pass in one batch gives the same image."""
    sequential = ebra_purify(tiny_ensemble, covers, batch_passes=False)
    batched = ebra_purify(tiny_ensemble, covers, batch_passes=True)
    assert torch.allclose(sequential, batched, atol=1e-5)


def test_purify_is_deterministic_and_in_range(covers: torch.Tensor) -> None:
    """The inpainting-only variant also produces valid, repeatable images."""
    torch.manual_seed(3)
    ensemble = build_ebra_ensemble(64, 8, 2, base=4, use_auxiliary=False).eval()
    first = ebra_purify(ensemble, covers, start=(1, 2))
    assert torch.equal(first, ebra_purify(ensemble, covers, start=(1, 2)))
    assert 0.0 <= float(first.min()) and float(first.max()) <= 1.0


def test_checkpoint_round_trip(
    tiny_ensemble: EbraEnsemble, covers: torch.Tensor, tmp_path: Path
) -> None:
    """A saved ensemble purifies identically after loading."""
    path = save_ebra_ensemble(tiny_ensemble, tmp_path / "ebra_k16_d1.joblib")
    loaded = load_ebra_ensemble(path)
    assert loaded.hparams() == tiny_ensemble.hparams()
    assert torch.allclose(ebra_purify(loaded, covers), ebra_purify(tiny_ensemble, covers))


@pytest.mark.parametrize("k, depth", [(2, 1), (4, 1), (8, 2), (16, 3), (50, 3)])
def test_local_discriminator_depth(k: int, depth: int) -> None:
    """Small tiles get shallower local discriminators."""
    assert local_disc_depth(k) == depth


def test_train_config_validation() -> None:
    """Canny thresholds must be ordered; unknown VGG layers are refused."""
    with pytest.raises(ConfigurationError):
        EbraTrainConfig(canny_low=0.3, canny_high=0.2)
    with pytest.raises(ConfigurationError):
        EbraTrainConfig.from_dict({"perceptual_layers": ["relu9_9"]})
    assert EbraTrainConfig.from_dict(EbraTrainConfig(k=8).to_dict()) == EbraTrainConfig(k=8)


@pytest.mark.parametrize("use_auxiliary", [True, False])
def test_training_runs_every_stage(cover_dir: Path, tmp_path: Path, use_auxiliary: bool) -> None:
    """One step per stage trains and logs each network of the ensemble."""
    data = load_dataset(cover_dir, 64, "all")
    cfg = EbraTrainConfig(
        k=16,
        d=1,
        use_auxiliary=use_auxiliary,
        base=4,
        disc_base=4,
        edge_steps=1,
        color_steps=1,
        inpaint_steps=1,
        batch_size=2,
        slic_segments=4,
        perceptual_layers=("relu1_1", "relu2_1"),
        pretrained_perceptual=False,
    )
    ensemble = train_ebra(data, cfg, torch.device("cpu"), tmp_path / "cache", tmp_path)
    expected = {"inpainter", "config"}
    if use_auxiliary:
        expected |= {"edge_generator", "color_generator"}
    assert set(ensemble.train_log) == expected
    assert ensemble.use_auxiliary == use_auxiliary
    out = ebra_purify(ensemble, natural_images(2, 3, 64))
    assert out.shape == (2, 3, 64, 64)
