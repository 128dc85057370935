"""Tests for image-quality metrics and report rows."""

from pathlib import Path
from typing import Tuple

import numpy as np
import piq
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stegpurify._util import GeometryError, ShapeError
from stegpurify.image_core import to_luminance
from stegpurify.metrics import (
    PSNR_CAP,
    MetricReportRow,
    ber,
    per,
    psnr,
    read_rows_csv,
    report,
    row_columns,
    ssim,
    ssim_per_image,
    vif,
    vif_per_image,
    write_rows_csv,
)

from .conftest import natural_images


def noisy(x: torch.Tensor, sigma: float, seed: int = 0) -> torch.Tensor:
    """x plus clipped Gaussian noise."""
    generator = torch.Generator().manual_seed(seed)
    return (x + sigma * torch.randn(x.shape, generator=generator)).clamp(0.0, 1.0)


def random_pairs(
    count: int = 200, size: int = 16, seed: int = 0
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Uniform grayscale images and partly correlated partners, in float64."""
    generator = torch.Generator().manual_seed(seed)
    a = torch.rand((count, 1, size, size), generator=generator, dtype=torch.float64)
    mix = torch.rand((count, 1, 1, 1), generator=generator, dtype=torch.float64)
    fresh = torch.rand((count, 1, size, size), generator=generator, dtype=torch.float64)
    return a, mix * a + (1 - mix) * fresh


def ssim_by_summation(x: np.ndarray, y: np.ndarray) -> float:
    """Mean SSIM over every full 11x11 Gaussian window (sigma 1.5), written out."""
    offsets = np.arange(-5, 6)
    taps = np.exp(-0.5 * (offsets / 1.5) ** 2)
    taps /= taps.sum()
    weights = np.outer(taps, taps)
    c1, c2 = 0.01**2, 0.03**2
    values = []
    for i in range(5, x.shape[0] - 5):
        for j in range(5, x.shape[1] - 5):
            px, py = x[i - 5 : i + 6, j - 5 : j + 6], y[i - 5 : i + 6, j - 5 : j + 6]
            mx, my = (weights * px).sum(), (weights * py).sum()
            vx = (weights * px * px).sum() - mx * mx
            vy = (weights * py * py).sum() - my * my
            cxy = (weights * px * py).sum() - mx * my
            values.append(
                ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(values))


def ber_by_summation(a: torch.Tensor, b: torch.Tensor, encoding: str) -> float:
    """Flipped bits counted value by value."""
    qa = np.rint(np.clip(a.numpy(), 0.0, 1.0) * 255.0).astype(int).ravel()
    qb = np.rint(np.clip(b.numpy(), 0.0, 1.0) * 255.0).astype(int).ravel()
    if encoding == "binarized":
        return sum(int(p >= 128) != int(q >= 128) for p, q in zip(qa, qb)) / qa.size
    return sum(bin(int(p) ^ int(q)).count("1") for p, q in zip(qa, qb)) / (8 * qa.size)


def test_psnr_values() -> None:
    """Identical images hit the cap; known errors give known decibels."""
    x = torch.full((2, 3, 8, 8), 0.5)
    assert psnr(x, x) == PSNR_CAP
    assert psnr(x, x + 0.1) == pytest.approx(20.0, abs=1e-4)
    assert psnr(torch.zeros_like(x), torch.ones_like(x)) == pytest.approx(0.0)
    assert psnr(torch.zeros_like(x), x) == pytest.approx(6.0206, abs=1e-4)


def test_ssim_and_vif_of_identical_images_are_one() -> None:
    """Perfect copies score 1."""
    x = natural_images(2, 3, 64)
    assert ssim(x, x) == pytest.approx(1.0)
    assert vif(x, x) == pytest.approx(1.0)


def test_quality_drops_with_noise() -> None:
    """More noise means lower PSNR, SSIM and VIF."""
    x = natural_images(2, 3, 64)
    light, heavy = noisy(x, 0.02), noisy(x, 0.2)
    assert psnr(x, light) > psnr(x, heavy)
    assert ssim(x, light) > ssim(x, heavy)
    assert 0.0 <= vif(x, heavy) < vif(x, light) <= 1.0


def test_vif_of_flat_reference_is_zero() -> None:
    """A constant reference carries no information."""
    flat = torch.full((1, 1, 48, 48), 0.5)
    assert vif(flat, noisy(flat, 0.1)) == 0.0


def test_window_metrics_need_large_enough_images() -> None:
    """SSIM needs the 11px window and VIF needs 41px."""
    small = torch.rand(1, 1, 8, 8)
    with pytest.raises(GeometryError):
        ssim(small, small)
    medium = torch.rand(1, 1, 40, 40)
    with pytest.raises(GeometryError):
        vif(medium, medium)


def test_shape_mismatch() -> None:
    """Metrics compare equal shapes only."""
    with pytest.raises(ShapeError):
        psnr(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 16, 8))


def test_bit_error_rates() -> None:
    """Binarised and byte-level encodings count flipped bits."""
    zeros, ones = torch.zeros((1, 1, 8, 8)), torch.ones((1, 1, 8, 8))
    assert ber(zeros, ones, "binarized") == 1.0
    assert ber(zeros, ones, "bytes") == 1.0
    assert ber(zeros, torch.full_like(zeros, 1 / 255), "bytes") == pytest.approx(1 / 8)
    assert ber(zeros, torch.full_like(zeros, 1 / 255), "binarized") == 0.0
    with pytest.raises(ShapeError):
        ber(zeros, ones, "gray")


def test_pixel_error_rate_thresholds() -> None:
    """A difference of 5 counts for xi < 5 only."""
    a, b = torch.zeros((1, 3, 4, 4)), torch.full((1, 3, 4, 4), 5 / 255)
    assert per(a, b, 4) == 1.0
    assert per(a, b, 5) == 0.0
    with pytest.raises(ValueError):
        per(a, b, -1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.0, 0.5))
def test_metric_properties(seed: int, sigma: float) -> None:
    """PSNR is symmetric, rates lie in [0, 1] and PER falls as the threshold rises."""
    a = natural_images(1, 3, 16, seed=seed)
    b = noisy(a, sigma, seed)
    assert psnr(a, b) == pytest.approx(psnr(b, a))
    assert 0.0 <= ber(a, b) <= 1.0
    rates = [per(a, b, xi) for xi in (0, 5, 10)]
    assert rates == sorted(rates, reverse=True)


def test_report_of_untouched_cell(covers: torch.Tensor) -> None:
    """An identity attack scores perfectly and respects the quality budget."""
    secrets = torch.roll(covers, 1, dims=0)
    row = report("UDH", "identity", covers, covers, secrets, secrets, (0, 5), 25.0, "{}")
    assert row.psnr_c == PSNR_CAP and row.psnr_s == PSNR_CAP
    assert row.ssim_c == pytest.approx(1.0) and row.vif_s == pytest.approx(1.0)
    assert row.ber_binarized == 0.0 and row.per == {0: 0.0, 5: 0.0}
    assert row.samples == 4 and row.feasible is True
    with pytest.raises(ShapeError):
        report("UDH", "x", covers, covers, secrets[:2], secrets[:2])


def test_rows_survive_csv(tmp_path: Path) -> None:
    """Rows written to CSV read back with six-decimal precision."""
    rows = [
        MetricReportRow("UDH", "lattice", "{}", psnr_c=31.25, vif_s=0.1234567, per={0: 0.5}),
        MetricReportRow("DDH", "ebra", samples=3, quality_budget=25.0, psnr_c=20.0, per={0: 0.0}),
    ]
    path = write_rows_csv(rows, tmp_path / "tables" / "rows.csv")
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header.split(",") == row_columns([0])
    loaded = read_rows_csv(path)
    assert loaded[0].vif_s == pytest.approx(0.123457)
    assert loaded[0].quality_budget is None and loaded[0].feasible is None
    assert loaded[1].feasible is False


def test_ssim_matches_windowed_summation() -> None:
    """SSIM agrees with the windowed sums on 200 random 16x16 pairs."""
    a, b = random_pairs()
    got = ssim_per_image(a, b)
    for i, value in enumerate(got):
        assert value == pytest.approx(ssim_by_summation(a[i, 0].numpy(), b[i, 0].numpy()), abs=1e-8)


def test_psnr_matches_mean_squared_error() -> None:
    """PSNR agrees with 10 log10(1 / MSE) on 200 random 16x16 pairs."""
    a, b = random_pairs(seed=2)
    for i in range(a.shape[0]):
        mse = float(((a[i] - b[i]) ** 2).mean())
        assert psnr(a[i : i + 1], b[i : i + 1]) == pytest.approx(10 * np.log10(1 / mse), abs=1e-6)


@pytest.mark.parametrize("encoding", ["binarized", "bytes"])
def test_ber_matches_bit_counting(encoding: str) -> None:
    """BER agrees with counting flipped bits on 200 random 16x16 pairs."""
    a, b = random_pairs(seed=1)
    for i in range(a.shape[0]):
        expected = ber_by_summation(a[i : i + 1], b[i : i + 1], encoding)
        assert ber(a[i : i + 1], b[i : i + 1], encoding) == pytest.approx(expected, abs=1e-12)


def test_vif_follows_pixel_domain_reference() -> None:
    """VIF is the pixel-domain VIF of the luminance, reference first, within [0, 1]."""
    x = natural_images(3, 3, 64, seed=5)
    for sigma in (0.02, 0.1, 0.3):
        y = noisy(x, sigma, seed=6)
        ref, tst = to_luminance(x).clamp(0.0, 1.0), to_luminance(y).clamp(0.0, 1.0)
        expected = piq.vif_p(tst, ref, data_range=1.0, reduction="none")
        expected = expected.clamp(0.0, 1.0).tolist()
        assert vif_per_image(x, y) == pytest.approx(expected, abs=1e-6)


def test_vif_against_black_is_near_zero() -> None:
    """A black test image keeps almost none of a natural reference."""
    x = natural_images(2, 3, 64, seed=2)
    assert vif(x, torch.zeros_like(x)) < 0.05


def test_report_clamps_negative_ssim() -> None:
    """A binary secret against its complement has negative SSIM, reported as 0."""
    rows = torch.arange(64).view(1, 1, 64, 1) // 8
    cols = torch.arange(64).view(1, 1, 1, 64) // 8
    board = ((rows + cols) % 2).float().repeat(2, 1, 1, 1)
    assert ssim(board, 1.0 - board) < 0.0
    covers = natural_images(2, 3, 64)
    row = report("UDH", "invert", covers, covers, board, 1.0 - board)
    assert row.ssim_s == 0.0
    assert row.ber_binarized == 1.0 and row.ber_bytes == 1.0


def test_report_averages_per_image_values() -> None:
    """Batch metrics are means of per-image values, not metrics of the pooled batch."""
    covers = natural_images(2, 3, 64, seed=3)
    attacked = covers.clone()
    attacked[1] = noisy(covers[1:2], 0.1, seed=4)[0]
    row = report("UDH", "half", covers, attacked, covers, attacked)
    assert row.psnr_c == pytest.approx((PSNR_CAP + psnr(covers[1:2], attacked[1:2])) / 2)
    assert row.psnr_c > 50.0
    expected_ssim = np.mean(np.clip(ssim_per_image(covers, attacked), 0.0, 1.0))
    expected_vif = np.mean(np.clip(vif_per_image(covers, attacked), 0.0, 1.0))
    assert row.ssim_c == pytest.approx(expected_ssim)
    assert row.vif_c == pytest.approx(expected_vif)
    assert row.vif_c == pytest.approx((1.0 + vif(covers[1:2], attacked[1:2])) / 2)
    assert row.samples == 2
