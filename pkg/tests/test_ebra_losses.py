"""Tests for the ensemble loss terms."""

import math

import pytest
import torch
from torch.autograd import gradcheck

from stegpurify.ebra_losses import (
    discriminator_loss,
    feature_matching_loss,
    generator_adversarial_loss,
    perceptual_loss,
    reconstruction_loss,
)


def double_input(seed: int) -> torch.Tensor:
    """4x4 double-precision leaf tensor."""
    generator = torch.Generator().manual_seed(seed)
    return torch.rand((1, 1, 4, 4), generator=generator, dtype=torch.float64).requires_grad_(True)


def test_losses_at_zero_logits() -> None:
    """An undecided discriminator scores ln 2 per term."""
    zeros = torch.zeros((2, 1, 4, 4))
    assert float(discriminator_loss(zeros, zeros)) == pytest.approx(2 * math.log(2), rel=1e-6)
    assert float(generator_adversarial_loss(zeros)) == pytest.approx(math.log(2), rel=1e-6)


def test_discriminator_loss_rewards_separation() -> None:
    """Confident correct logits give a lower loss than confused ones."""
    high, low = torch.full((1, 1, 2, 2), 5.0), torch.full((1, 1, 2, 2), -5.0)
    assert discriminator_loss(high, low) < discriminator_loss(low, high)


def test_feature_terms_vanish_on_identical_inputs() -> None:
    """Equal features cost nothing; mismatched layer counts are refused."""
    features = [torch.rand(1, 4, 8, 8), torch.rand(1, 8, 4, 4)]
    assert float(feature_matching_loss(features, features)) == 0.0
    named = {"relu1_1": features[0], "relu2_1": features[1]}
    assert float(perceptual_loss(named, named)) == 0.0
    with pytest.raises(ValueError):
        feature_matching_loss(features, features[:1])


def test_reconstruction_is_mean_absolute_error() -> None:
    """L1 averages over every element."""
    assert float(reconstruction_loss(torch.ones(2, 3, 4, 4), torch.zeros(2, 3, 4, 4))) == 1.0


def test_gradients_match_finite_differences() -> None:
    """Analytic gradients of every term agree with numerical ones."""
    real, fake = double_input(0), double_input(1)
    assert gradcheck(discriminator_loss, (real, fake))
    assert gradcheck(generator_adversarial_loss, (fake,))
    target = real.detach()
    assert gradcheck(lambda b: feature_matching_loss([target], [b]), (fake,))
    assert gradcheck(reconstruction_loss, (fake, real))
    assert gradcheck(lambda b: perceptual_loss({"x": target}, {"x": b}), (fake,))
