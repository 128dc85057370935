"""Networks of the erase-and-repair attack.

The edge generator (I1) and colour generator (I2) share one encoder-decoder topology and
expose the feature maps of their last four layers. The inpainting model (I3) is built from
gated and dilated gated convolutions and fuses those maps at matching resolutions.
"""

from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import VGG19_Weights, vgg19
from torchvision.models.vgg import cfgs, make_layers

from stegpurify._util import ConfigurationError

TAP_NAMES = ("resblocks", "up1", "up2", "pre_out")
VGG_LAYERS = {"relu1_1": 1, "relu2_1": 6, "relu3_1": 11, "relu4_1": 20, "relu5_1": 29}
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ResnetBlock(nn.Module):
    """Dilated residual block of the auxiliary generators."""

    def __init__(self, channels: int, dilation: int = 2):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(dilation),
            nn.Conv2d(channels, channels, kernel_size=3, dilation=dilation),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, kernel_size=3),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class AuxiliaryGenerator(nn.Module):
    """Encoder-decoder with three residual blocks, used for both I1 and I2.

    ``forward`` returns the sigmoid output and the four tapped feature maps at
    H/4, H/2, H and H.
    """

    def __init__(self, in_channels: int, out_channels: int, base: int = 32, res_blocks: int = 3):
        super().__init__()
        self.encoder = nn.Sequential(
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, base, kernel_size=7),
            nn.InstanceNorm2d(base),
            nn.ReLU(inplace=True),
            nn.Conv2d(base, base * 2, kernel_size=4, stride=2, padding=1),
            nn.InstanceNorm2d(base * 2),
            nn.ReLU(inplace=True),
            nn.Conv2d(base * 2, base * 4, kernel_size=4, stride=2, padding=1),
            nn.InstanceNorm2d(base * 4),
            nn.ReLU(inplace=True),
        )
        self.resblocks = nn.Sequential(*[ResnetBlock(base * 4) for _ in range(res_blocks)])
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(base * 4, base * 2, kernel_size=4, stride=2, padding=1),
            nn.InstanceNorm2d(base * 2),
            nn.ReLU(inplace=True),
        )
        self.up2 = nn.Sequential(
            nn.ConvTranspose2d(base * 2, base, kernel_size=4, stride=2, padding=1),
            nn.InstanceNorm2d(base),
            nn.ReLU(inplace=True),
        )
        self.pre_out = nn.Sequential(
            nn.Conv2d(base, base, kernel_size=3, padding=1), nn.ReLU(inplace=True)
        )
        self.out = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(base, out_channels, kernel_size=7)
        )
        self.tap_channels = (base * 4, base * 2, base, base)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        taps = []
        y = self.resblocks(self.encoder(x))
        taps.append(y)
        y = self.up1(y)
        taps.append(y)
        y = self.up2(y)
        taps.append(y)
        y = self.pre_out(y)
        taps.append(y)
        return torch.sigmoid(self.out(y)), taps


class GatedConv2d(nn.Module):
    """act(conv_feat(x)) * sigmoid(conv_gate(x)), with optional dilation."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        dilation: int = 1,
        activation: nn.Module | None = None,
    ):
        super().__init__()
        padding = dilation * (kernel_size - 1) // 2
        options = {"stride": stride, "padding": padding, "dilation": dilation}
        self.conv_feat = nn.Conv2d(in_channels, out_channels, kernel_size, **options)
        self.conv_gate = nn.Conv2d(in_channels, out_channels, kernel_size, **options)
        self.activation = activation if activation is not None else nn.ELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.activation(self.conv_feat(x)) * torch.sigmoid(self.conv_gate(x))


class FusionBlock(nn.Module):
    """Concatenate auxiliary feature maps onto the decoder state, then 1x1 projection."""

    def __init__(self, channels: int, aux_channels: int):
        super().__init__()
        self.project = nn.Sequential(
            nn.Conv2d(channels + aux_channels, channels, kernel_size=1), nn.ELU()
        )

    def forward(self, x: torch.Tensor, aux: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.project(torch.cat([x, *aux], dim=1))


class InpaintingNet(nn.Module):
    """Gated-convolution inpainting model with four fusion points.

    Input is the masked image and its mask. ``aux_channels`` gives, per fusion point, the
    total channel count contributed by the auxiliary generators; ``None`` disables fusion.
    """

    def __init__(
        self, channels: int = 3, base: int = 32, aux_channels: Sequence[int] | None = None
    ):
        super().__init__()
        self.use_fusion = aux_channels is not None
        self.enc0 = GatedConv2d(channels + 1, base, kernel_size=5)
        self.enc1 = GatedConv2d(base, base * 2, stride=2)
        self.enc2 = GatedConv2d(base * 2, base * 4, stride=2)
        self.bottleneck = nn.Sequential(
            GatedConv2d(base * 4, base * 4, dilation=2),
            GatedConv2d(base * 4, base * 4, dilation=4),
            GatedConv2d(base * 4, base * 4, dilation=8),
            GatedConv2d(base * 4, base * 4),
        )
        self.dec1 = GatedConv2d(base * 4, base * 2)
        self.dec2 = GatedConv2d(base * 2, base)
        self.dec3 = GatedConv2d(base, base)
        self.out = nn.Conv2d(base, channels, kernel_size=3, padding=1)
        self.fusion_channels = (base * 4, base * 2, base, base)
        self.fusions = nn.ModuleList()
        if aux_channels is not None:
            if len(aux_channels) != len(self.fusion_channels):
                raise ConfigurationError("InpaintingNet needs exactly four fusion tap widths")
            self.fusions = nn.ModuleList(
                FusionBlock(ch, aux) for ch, aux in zip(self.fusion_channels, aux_channels)
            )

    def _fuse(self, index: int, x: torch.Tensor, aux: Sequence[Sequence[torch.Tensor]]):
        if not self.use_fusion:
            return x
        return self.fusions[index](x, [taps[index] for taps in aux])

    def forward(
        self,
        masked: torch.Tensor,
        mask: torch.Tensor,
        aux: Sequence[Sequence[torch.Tensor]] = (),
    ) -> torch.Tensor:
        y = self.enc0(torch.cat([masked, mask], dim=1))
        y = self.enc2(self.enc1(y))
        y = self._fuse(0, self.bottleneck(y), aux)
        y = self._fuse(1, self.dec1(F.interpolate(y, scale_factor=2, mode="nearest")), aux)
        y = self._fuse(2, self.dec2(F.interpolate(y, scale_factor=2, mode="nearest")), aux)
        y = self._fuse(3, self.dec3(y), aux)
        return torch.sigmoid(self.out(y))


class PatchDiscriminator(nn.Module):
    """Spectral-norm patch discriminator returning logits and intermediate features."""

    def __init__(self, in_channels: int, base: int = 32, depth: int = 3):
        super().__init__()
        layers = []
        channels = in_channels
        for i in range(depth):
            out = base * 2**i
            layers.append(
                nn.Sequential(
                    nn.utils.spectral_norm(
                        nn.Conv2d(channels, out, kernel_size=4, stride=2, padding=1)
                    ),
                    nn.LeakyReLU(0.2),
                )
            )
            channels = out
        self.layers = nn.ModuleList(layers)
        self.head = nn.utils.spectral_norm(nn.Conv2d(channels, 1, kernel_size=3, padding=1))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        features = []
        for layer in self.layers:
            x = layer(x)
            features.append(x)
        return self.head(x), features


class PerceptualExtractor(nn.Module):
    """Frozen VGG19 features at relu1_1 ... relu5_1 on ImageNet-normalised input.

    ``pretrained=False`` keeps the random initial weights for hermetic tests.
    """

    def __init__(self, layers: Sequence[str] = tuple(VGG_LAYERS), pretrained: bool = True):
        super().__init__()
        unknown = set(layers) - set(VGG_LAYERS)
        if unknown:
            raise ConfigurationError(f"Unknown VGG layers: {', '.join(sorted(unknown))}")
        self.layers = tuple(sorted(layers, key=VGG_LAYERS.__getitem__))
        depth = VGG_LAYERS[self.layers[-1]] + 1
        if pretrained:
            features = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        else:
            features = make_layers(cfgs["E"], batch_norm=False)
        self.features = features[:depth]
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.eval()
        for param in self.parameters():
            param.requires_grad_(False)

    def train(self, mode: bool = True) -> "PerceptualExtractor":
        return super().train(False)

    def forward(self, x: torch.Tensor) -> Dict[str, torch.Tensor]:
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        wanted = {VGG_LAYERS[name]: name for name in self.layers}
        out = {}
        for index, layer in enumerate(self.features):
            x = layer(x)
            if index in wanted:
                out[wanted[index]] = x
        return out
