"""Differentiable noise layers inserted between hiding and revealing during training."""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Tuple

import torch
import torchvision.transforms.functional as TF
from torch import nn

from stegpurify._util import CheckpointError, ConfigurationError
from stegpurify.checkpoint import load_checkpoint, restore_module
from stegpurify.hiding_models import NoiseAutoencoder
from stegpurify.schema import (
    SchemaConfig,
    is_int,
    is_optional_str,
    is_range,
    one_of,
)

logger = logging.getLogger(__name__)

NOISE_KINDS = ("none", "GB", "GN", "Drop", "JPEG", "Quan", "AE", "combined")
COMBINABLE = ("GB", "GN", "Drop", "JPEG", "Quan", "AE")

# Standard JPEG quantisation tables (luminance, chrominance)
_LUMA_TABLE = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
]
_CHROMA_TABLE = [
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
]


def _is_weights(val) -> bool:
    return (
        isinstance(val, dict)
        and bool(val)
        and all(k in COMBINABLE for k in val)
        and all(isinstance(w, (int, float)) and w >= 0 for w in val.values())
        and sum(val.values()) > 0
    )


def _is_quality_range(val) -> bool:
    return is_range(val) and 1 <= val[0] and val[1] <= 100


def _is_odd_kernel(val) -> bool:
    return is_int(val) and val >= 1 and val % 2 == 1


@dataclass
class NoiseLayerConfig(SchemaConfig):
    """One noise kind plus the ranges its random parameters are drawn from."""

    kind: str = "none"
    blur_sigma: Tuple[float, float] = (0.5, 1.5)
    blur_kernel: int = 5
    noise_sigma: Tuple[float, float] = (0.0, 0.1)
    drop_rate: Tuple[float, float] = (0.1, 0.3)
    jpeg_quality: Tuple[float, float] = (50, 90)
    quant_levels: int = 256
    ae_checkpoint: str | None = None
    weights: Dict[str, float] = field(
        default_factory=lambda: {"GB": 1.0, "GN": 1.0, "Drop": 1.0, "JPEG": 1.0, "Quan": 1.0}
    )

    SCHEMA = {
        "kind": one_of(*NOISE_KINDS),
        "blur_sigma": lambda v: is_range(v) and v[0] > 0,
        "blur_kernel": _is_odd_kernel,
        "noise_sigma": is_range,
        "drop_rate": lambda v: is_range(v) and v[1] <= 1,
        "jpeg_quality": _is_quality_range,
        "quant_levels": lambda v: is_int(v) and v >= 2,
        "ae_checkpoint": is_optional_str,
        "weights": _is_weights,
    }


def _uniform(bounds: Tuple[float, float], generator: torch.Generator) -> float:
    low, high = bounds
    return float(low + (high - low) * torch.rand((), generator=generator))


def straight_through_round(x: torch.Tensor) -> torch.Tensor:
    """Round in the forward pass, identity gradient in the backward pass."""
    return x + (torch.round(x) - x).detach()


def dct_matrix(size: int = 8, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Orthonormal DCT-II basis as a (size, size) matrix."""
    n = torch.arange(size, dtype=torch.float64)
    basis = torch.cos(torch.pi * (2 * n[None, :] + 1) * n[:, None] / (2 * size))
    basis[0] *= 1 / torch.sqrt(torch.tensor(2.0, dtype=torch.float64))
    return (basis * torch.sqrt(torch.tensor(2.0 / size, dtype=torch.float64))).to(dtype)


def quality_table(quality: float, chroma: bool = False) -> torch.Tensor:
    """IJG-scaled quantisation table; quality 100 gives all ones."""
    base = torch.tensor(_CHROMA_TABLE if chroma else _LUMA_TABLE, dtype=torch.float32)
    quality = min(max(quality, 1.0), 100.0)
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return torch.clamp(torch.floor((base * scale + 50.0) / 100.0), min=1.0)


def _rgb_to_ycbcr(x: torch.Tensor) -> torch.Tensor:
    r, g, b = x[:, 0], x[:, 1], x[:, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 0.5 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 0.5 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return torch.stack([y, cb, cr], dim=1)


def _ycbcr_to_rgb(x: torch.Tensor) -> torch.Tensor:
    y, cb, cr = x[:, 0], x[:, 1] - 0.5, x[:, 2] - 0.5
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return torch.stack([r, g, b], dim=1)


def jpeg_surrogate(x: torch.Tensor, quality: float) -> torch.Tensor:
    """Differentiable JPEG: 8x8 DCT, straight-through quantisation, inverse DCT."""
    batch, channels, height, width = x.shape
    planes = _rgb_to_ycbcr(x) if channels == 3 else x
    planes = planes * 255.0 - 128.0
    blocks = planes.reshape(batch, channels, height // 8, 8, width // 8, 8).permute(
        0, 1, 2, 4, 3, 5
    )
    basis = dct_matrix(8, x.dtype).to(x.device)
    coeffs = basis @ blocks @ basis.T
    tables = torch.stack(
        [quality_table(quality, chroma=c > 0) for c in range(channels)]
    ).to(device=x.device, dtype=x.dtype)
    tables = tables[None, :, None, None]
    coeffs = straight_through_round(coeffs / tables) * tables
    blocks = basis.T @ coeffs @ basis
    planes = blocks.permute(0, 1, 2, 4, 3, 5).reshape(batch, channels, height, width)
    planes = (planes + 128.0) / 255.0
    out = _ycbcr_to_rgb(planes) if channels == 3 else planes
    return out.clamp(0.0, 1.0)


def quantize(x: torch.Tensor, levels: int) -> torch.Tensor:
    """Straight-through uniform quantisation onto ``levels`` values."""
    steps = levels - 1
    return (straight_through_round(x * steps) / steps).clamp(0.0, 1.0)


@lru_cache(maxsize=4)
def load_noise_autoencoder(path: str) -> NoiseAutoencoder:
    """Frozen AE noise layer from a noise_autoencoder checkpoint."""
    try:
        payload = load_checkpoint(path, "noise_autoencoder")
    except CheckpointError as exc:
        raise ConfigurationError(f"AE noise layer checkpoint unavailable: {exc}") from exc
    model = NoiseAutoencoder(**payload["hparams"])
    restore_module(model, payload["state"]["autoencoder"])
    model.eval()
    for param in model.parameters():
        param.requires_grad_(False)
    return model


def _apply_kind(
    kind: str, config: NoiseLayerConfig, x: torch.Tensor, generator: torch.Generator
) -> torch.Tensor:
    if kind == "none":
        return x
    if kind == "GB":
        sigma = _uniform(config.blur_sigma, generator)
        kernel = [config.blur_kernel, config.blur_kernel]
        return TF.gaussian_blur(x, kernel_size=kernel, sigma=[sigma, sigma]).clamp(0.0, 1.0)
    if kind == "GN":
        sigma = _uniform(config.noise_sigma, generator)
        noise = torch.randn(x.shape, generator=generator).to(x.device, x.dtype)
        return (x + sigma * noise).clamp(0.0, 1.0)
    if kind == "Drop":
        rate = _uniform(config.drop_rate, generator)
        keep = torch.rand((x.shape[0], 1, *x.shape[2:]), generator=generator) >= rate
        return x * keep.to(x.device, x.dtype)
    if kind == "JPEG":
        return jpeg_surrogate(x, _uniform(config.jpeg_quality, generator))
    if kind == "Quan":
        return quantize(x, config.quant_levels)
    if kind == "AE":
        if not config.ae_checkpoint:
            raise ConfigurationError("Noise kind AE needs ae_checkpoint")
        model = load_noise_autoencoder(config.ae_checkpoint).to(x.device)
        return model(x)
    raise ConfigurationError(f"Unsupported noise kind: {kind}")


def sample_kind(config: NoiseLayerConfig, generator: torch.Generator) -> str:
    """The concrete kind applied for one step (a weighted draw when combined)."""
    if config.kind != "combined":
        return config.kind
    names = list(config.weights)
    weights = torch.tensor([float(config.weights[n]) for n in names])
    return names[int(torch.multinomial(weights, 1, generator=generator))]


def apply_noise(
    config: NoiseLayerConfig, x: torch.Tensor, seed: int | torch.Generator = 0
) -> torch.Tensor:
    """Distort ``x`` with exactly one noise kind, keeping the graph differentiable."""
    generator = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(seed)
    kind = sample_kind(config, generator)
    return _apply_kind(kind, config, x, generator)


class NoiseLayer(nn.Module):
    """Module wrapper that draws a fresh seed from its own generator per call."""

    def __init__(self, config: NoiseLayerConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.generator = torch.Generator().manual_seed(seed)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return apply_noise(self.config, x, self.generator)
