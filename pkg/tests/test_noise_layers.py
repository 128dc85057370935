"""Tests for the differentiable training-time noise layers."""

import pytest
import torch

from stegpurify._util import ConfigurationError
from stegpurify.noise_layers import (
    NoiseLayer,
    NoiseLayerConfig,
    apply_noise,
    dct_matrix,
    jpeg_surrogate,
    quality_table,
    quantize,
    sample_kind,
    straight_through_round,
)

from .conftest import natural_images


@pytest.mark.parametrize("kind", ["none", "GB", "GN", "Drop", "JPEG", "Quan"])
def test_noise_keeps_shape_range_and_gradient(kind: str) -> None:
    """Every kind returns a [0, 1] image of the same shape that gradients pass through."""
    x = natural_images(2, 3, 32).requires_grad_(True)
    out = apply_noise(NoiseLayerConfig(kind=kind), x, seed=3)
    assert out.shape == x.shape
    assert 0.0 <= float(out.min()) and float(out.max()) <= 1.0
    out.sum().backward()
    assert x.grad is not None and float(x.grad.abs().sum()) > 0


def test_seeded_noise_is_reproducible() -> None:
    """The same seed draws the same distortion."""
    x = natural_images(2, 3, 32)
    cfg = NoiseLayerConfig(kind="GN")
    assert torch.equal(apply_noise(cfg, x, seed=7), apply_noise(cfg, x, seed=7))
    assert not torch.equal(apply_noise(cfg, x, seed=7), apply_noise(cfg, x, seed=8))


def test_noise_layer_advances_its_generator() -> None:
    """Consecutive calls of one NoiseLayer draw different noise."""
    x = natural_images(1, 3, 32)
    layer = NoiseLayer(NoiseLayerConfig(kind="GN"), seed=0)
    assert not torch.equal(layer(x), layer(x))


def test_combined_draws_only_weighted_kinds() -> None:
    """combined picks among kinds with positive weight."""
    cfg = NoiseLayerConfig(kind="combined", weights={"GB": 1.0, "Quan": 0.0})
    generator = torch.Generator().manual_seed(0)
    assert {sample_kind(cfg, generator) for _ in range(20)} == {"GB"}


@pytest.mark.parametrize(
    "raw",
    [
        {"kind": "Rotate"},
        {"kind": "combined", "weights": {"GB": 0.0}},
        {"kind": "combined", "weights": {"Crop": 1.0}},
        {"blur_kernel": 4},
        {"jpeg_quality": [0, 90]},
        {"drop_rate": [0.2, 1.5]},
    ],
)
def test_invalid_noise_settings(raw) -> None:
    """Bad kinds, weights and ranges are configuration errors."""
    with pytest.raises(ConfigurationError):
        NoiseLayerConfig.from_dict(raw)


def test_ae_noise_needs_a_checkpoint() -> None:
    """The AE kind cannot run without its pre-trained autoencoder."""
    with pytest.raises(ConfigurationError):
        apply_noise(NoiseLayerConfig(kind="AE"), natural_images(1, 3, 32))


def test_dct_basis_is_orthonormal() -> None:
    """B @ B.T is the identity."""
    basis = dct_matrix(8, torch.float64)
    assert torch.allclose(basis @ basis.T, torch.eye(8, dtype=torch.float64), atol=1e-10)


def test_quality_tables() -> None:
    """Quality 50 is the base table and quality 100 is all ones."""
    assert quality_table(50)[0, 0] == 16
    assert torch.all(quality_table(100) == 1)
    assert quality_table(10).sum() > quality_table(90).sum()


def test_jpeg_surrogate_at_full_quality_is_nearly_lossless() -> None:
    """Unit quantisation steps only round the coefficients."""
    x = natural_images(1, 3, 32)
    assert float((jpeg_surrogate(x, 100) - x).abs().max()) < 0.02
    assert float((jpeg_surrogate(x, 10) - x).abs().mean()) > float(
        (jpeg_surrogate(x, 90) - x).abs().mean()
    )


def test_straight_through_gradients() -> None:
    """Rounding passes the gradient through unchanged."""
    x = torch.tensor([0.2, 0.7, 1.4], requires_grad=True)
    straight_through_round(x).sum().backward()
    assert torch.equal(x.grad, torch.ones(3))
    assert torch.equal(quantize(torch.tensor([0.0, 0.51, 1.0]), 2), torch.tensor([0.0, 1.0, 1.0]))
