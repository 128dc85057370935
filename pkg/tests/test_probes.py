"""Tests for the locality and redundancy probes."""

import pytest
import torch

from stegpurify._util import GeometryError, OutOfRangeIndexError
from stegpurify.hiding import HidingPair, hide, make_secret_batch
from stegpurify.probes import locality_probe, receptive_radius, redundancy_probe


def test_radius_comes_from_reveal_depth(tiny_pair: HidingPair) -> None:
    """One pixel per 3x3 layer."""
    assert receptive_radius(tiny_pair) == 6


def test_removed_window_only_affects_its_neighbourhood(
    tiny_pair: HidingPair, covers: torch.Tensor
) -> None:
    """Zeroing a window leaves outputs beyond the receptive radius untouched."""
    secrets = make_secret_batch(covers, 3)
    report = locality_probe(tiny_pair, covers, secrets, 8, positions=[(24, 24), (0, 40)])
    assert report.error_maps.shape == (2, 64, 64)
    assert report.outside_mean <= 1e-6
    assert report.inside_mean > report.outside_mean


def test_keep_mode_reports_each_position(tiny_pair: HidingPair, covers: torch.Tensor) -> None:
    """keep mode produces one map per sampled position."""
    secrets = make_secret_batch(covers, 3)
    report = locality_probe(tiny_pair, covers, secrets, 32, mode="keep", count=3, seed=2)
    assert len(report.positions) == 3
    assert report.error_maps.shape == (3, 64, 64)
    assert report.ratio >= 0


def test_zero_window_is_empty(tiny_pair: HidingPair, covers: torch.Tensor) -> None:
    """A zero-sized window ablates nothing."""
    report = locality_probe(tiny_pair, covers, make_secret_batch(covers, 3), 0)
    assert report.positions == [] and report.ratio == 0.0


def test_invalid_probe_arguments(tiny_pair: HidingPair, covers: torch.Tensor) -> None:
    """Windows larger than the image and unknown modes are refused."""
    secrets = make_secret_batch(covers, 3)
    with pytest.raises(GeometryError):
        locality_probe(tiny_pair, covers, secrets, 65)
    with pytest.raises(ValueError):
        locality_probe(tiny_pair, covers, secrets, 8, mode="blur")


def test_single_pixel_change_stays_within_radius(
    tiny_pair: HidingPair, covers: torch.Tensor
) -> None:
    """Zeroing one pixel moves revealed pixels no further than the receptive radius."""
    c_prime = hide(tiny_pair, covers[:2], make_secret_batch(covers[:2], 3))
    report = redundancy_probe(tiny_pair, c_prime, (32, 32), threshold=1e-6)
    assert report.radius is not None
    assert report.radius <= receptive_radius(tiny_pair)
    assert report.changed_pixels > 0
    with pytest.raises(OutOfRangeIndexError):
        redundancy_probe(tiny_pair, c_prime, (64, 0))
