"""Network definitions for the hiding schemes and the AE noise layer."""

import torch
from torch import nn


def scaled_width(base: int, width_scale: float) -> int:
    """Channel count for a desk-scale model."""
    return max(4, int(round(base * width_scale)))


def _down(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel_size=4, stride=2, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.LeakyReLU(0.2, inplace=True),
    )


def _up(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, kernel_size=4, stride=2, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class HidingNet(nn.Module):
    """U-Net with three downsamplings and skip concatenation.

    With ``residual=True`` (UDH) the output is a tanh residual whose last layer starts near
    zero, so an untrained container is almost the cover. Otherwise (DDH) the output is a
    sigmoid container.
    """

    def __init__(self, in_channels: int, out_channels: int, base: int, residual: bool):
        super().__init__()
        self.residual = residual
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base, kernel_size=3, padding=1), nn.LeakyReLU(0.2, inplace=True)
        )
        self.down1 = _down(base, base * 2)
        self.down2 = _down(base * 2, base * 4)
        self.down3 = _down(base * 4, base * 8)
        self.up3 = _up(base * 8, base * 4)
        self.up2 = _up(base * 8, base * 2)
        self.up1 = _up(base * 4, base)
        self.head = nn.Conv2d(base * 2, out_channels, kernel_size=3, padding=1)
        if residual:
            nn.init.normal_(self.head.weight, std=1e-4)
            nn.init.zeros_(self.head.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x0 = self.stem(x)
        x1 = self.down1(x0)
        x2 = self.down2(x1)
        x3 = self.down3(x2)
        y = self.up3(x3)
        y = self.up2(torch.cat([y, x2], dim=1))
        y = self.up1(torch.cat([y, x1], dim=1))
        y = self.head(torch.cat([y, x0], dim=1))
        return torch.tanh(y) if self.residual else torch.sigmoid(y)


class RevealNet(nn.Module):
    """Plain stack of 3x3 convolutions without downsampling."""

    def __init__(self, in_channels: int, out_channels: int, base: int, depth: int = 6):
        super().__init__()
        if depth < 2:
            raise ValueError("RevealNet needs at least two layers")
        self.depth = depth
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, base, kernel_size=3, padding=1),
            nn.BatchNorm2d(base),
            nn.ReLU(inplace=True),
        ]
        for _ in range(depth - 2):
            layers += [
                nn.Conv2d(base, base, kernel_size=3, padding=1),
                nn.BatchNorm2d(base),
                nn.ReLU(inplace=True),
            ]
        layers += [nn.Conv2d(base, out_channels, kernel_size=3, padding=1), nn.Sigmoid()]
        self.body = nn.Sequential(*layers)

    @property
    def receptive_field_radius(self) -> int:
        """Analytic receptive-field radius in pixels (one per 3x3 layer)."""
        return self.depth

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class NoiseAutoencoder(nn.Module):
    """Small convolutional autoencoder used as the AE noise layer."""

    def __init__(self, channels: int = 3, base: int = 32):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.Conv2d(channels, base, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(base, base * 2, kernel_size=4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(base * 2, base * 2, kernel_size=4, stride=2, padding=1),
            nn.ReLU(inplace=True),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(base * 2, base * 2, kernel_size=4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(base * 2, base, kernel_size=4, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(base, channels, kernel_size=3, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))
