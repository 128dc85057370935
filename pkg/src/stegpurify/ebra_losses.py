"""Loss terms for training the erase-and-repair ensemble."""

from typing import Mapping, Sequence

import torch
import torch.nn.functional as F


def discriminator_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy pushing real logits to 1 and fake logits to 0."""
    real = F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
    fake = F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits))
    return real + fake


def generator_adversarial_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: -log D(G(z))."""
    return F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))


def feature_matching_loss(
    real_features: Sequence[torch.Tensor], fake_features: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Sum over discriminator layers of the element-averaged L1 feature distance."""
    if len(real_features) != len(fake_features):
        raise ValueError("feature lists differ in length")
    total = fake_features[0].new_zeros(())
    for real, fake in zip(real_features, fake_features):
        total = total + F.l1_loss(fake, real.detach())
    return total


def reconstruction_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between the inpainted and the ground-truth image."""
    return F.l1_loss(output, target)


def perceptual_loss(
    target_features: Mapping[str, torch.Tensor], output_features: Mapping[str, torch.Tensor]
) -> torch.Tensor:
    """Sum over extractor layers of the element-averaged L1 feature distance."""
    total = next(iter(output_features.values())).new_zeros(())
    for name, target in target_features.items():
        total = total + F.l1_loss(output_features[name], target.detach())
    return total
