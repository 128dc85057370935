"""Box-free baseline distortions and the lattice attack."""

import io
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image
from skimage.draw import line

from stegpurify._util import ConfigurationError
from stegpurify.image_core import check_image, quantize_8bit
from stegpurify.schema import (
    SchemaConfig,
    is_int,
    is_non_negative,
    is_positive,
    is_probability,
    one_of,
)

logger = logging.getLogger(__name__)

DISTORTION_KINDS = ("GB", "GN", "JPEG", "Drop", "MB", "CD", "FPCA", "PD", "BDR")


def _is_size(val) -> bool:
    return isinstance(val, tuple) and len(val) == 2 and all(is_int(v) and v >= 1 for v in val)


@dataclass(frozen=True)
class DistortionSpec(SchemaConfig):  # pylint: disable=too-many-instance-attributes
    """One baseline distortion; only the parameters of ``kind`` are used."""

    kind: str = "GB"
    blur_sigma: float = 1.0
    blur_kernel: int = 5
    noise_sigma: float = 0.05
    jpeg_quality: int = 50
    drop_rate: float = 0.3
    motion_length: int = 7
    motion_angle: float | None = None
    cutout_count: int = 4
    cutout_size: Tuple[int, int] = (16, 16)
    pca_scale: float = 0.1
    deflections: int = 200
    deflection_window: int = 3
    bit_depth: int = 3
    seed: int = 0

    SCHEMA = {
        "kind": one_of(*DISTORTION_KINDS),
        "blur_sigma": is_positive,
        "blur_kernel": lambda v: is_int(v) and v >= 1 and v % 2 == 1,
        "noise_sigma": is_non_negative,
        "jpeg_quality": lambda v: is_int(v) and 1 <= v <= 100,
        "drop_rate": is_probability,
        "motion_length": lambda v: is_int(v) and v >= 1,
        "motion_angle": lambda v: v is None or (isinstance(v, (int, float)) and v == v),
        "cutout_count": lambda v: is_int(v) and v >= 0,
        "cutout_size": _is_size,
        "pca_scale": is_non_negative,
        "deflections": lambda v: is_int(v) and v >= 0,
        "deflection_window": lambda v: is_int(v) and v >= 1 and v % 2 == 1,
        "bit_depth": lambda v: is_int(v) and 1 <= v <= 8,
        "seed": is_int,
    }


@dataclass(frozen=True)
class LatticeSpec(SchemaConfig):
    """Replace one pixel every ``q`` pixels in both axes."""

    q: int = 5
    value_distribution: str = "uniform01"
    seed: int = 0

    SCHEMA = {
        "q": lambda v: is_int(v) and v >= 1,
        "value_distribution": one_of("uniform01"),
        "seed": is_int,
    }


Distortion = Callable[[DistortionSpec, torch.Tensor, np.random.Generator], torch.Tensor]


def _gaussian_blur(spec: DistortionSpec, x: torch.Tensor, _rng: np.random.Generator):
    kernel = [spec.blur_kernel, spec.blur_kernel]
    return TF.gaussian_blur(x, kernel_size=kernel, sigma=[spec.blur_sigma, spec.blur_sigma])


def _gaussian_noise(spec: DistortionSpec, x: torch.Tensor, rng: np.random.Generator):
    if spec.noise_sigma == 0:
        return x.clone()
    noise = torch.from_numpy(rng.standard_normal(x.shape)).to(x.device, x.dtype)
    return x + spec.noise_sigma * noise


def _jpeg(spec: DistortionSpec, x: torch.Tensor, _rng: np.random.Generator):
    return jpeg_roundtrip(x, spec.jpeg_quality)


def _drop(spec: DistortionSpec, x: torch.Tensor, rng: np.random.Generator):
    keep = rng.random((x.shape[0], 1, *x.shape[2:])) >= spec.drop_rate
    return x * torch.from_numpy(keep).to(x.device, x.dtype)


def motion_kernel(length: int, angle_degrees: float) -> np.ndarray:
    """Normalised line kernel of the given length through the kernel centre."""
    centre = length // 2
    kernel = np.zeros((length, length), dtype=np.float32)
    theta = np.deg2rad(angle_degrees)
    dr, dc = -np.sin(theta) * centre, np.cos(theta) * centre
    r0, c0 = int(round(centre - dr)), int(round(centre - dc))
    r1, c1 = int(round(centre + dr)), int(round(centre + dc))
    rr, cc = line(r0, c0, r1, c1)
    kernel[rr, cc] = 1.0
    return kernel / kernel.sum()


def _motion_blur(spec: DistortionSpec, x: torch.Tensor, rng: np.random.Generator):
    length = spec.motion_length + (spec.motion_length + 1) % 2
    pad = length // 2
    out = []
    for image in x:
        angle = spec.motion_angle if spec.motion_angle is not None else rng.uniform(0.0, 180.0)
        kernel = torch.from_numpy(motion_kernel(length, angle)).to(x.device, x.dtype)
        weight = kernel.expand(image.shape[0], 1, length, length)
        padded = F.pad(image[None], (pad, pad, pad, pad), mode="reflect")
        out.append(F.conv2d(padded, weight, groups=image.shape[0])[0])
    return torch.stack(out)


def _cutout(spec: DistortionSpec, x: torch.Tensor, rng: np.random.Generator):
    out = x.clone()
    height, width = x.shape[-2:]
    rect_h, rect_w = min(spec.cutout_size[0], height), min(spec.cutout_size[1], width)
    for image in out:
        for _ in range(spec.cutout_count):
            top = int(rng.integers(0, height - rect_h + 1))
            left = int(rng.integers(0, width - rect_w + 1))
            image[:, top : top + rect_h, left : left + rect_w] = 0.0
    return out


def _fancy_pca(spec: DistortionSpec, x: torch.Tensor, rng: np.random.Generator):
    out = []
    for image in x:
        pixels = image.detach().double().cpu().numpy().reshape(image.shape[0], -1)
        cov = np.atleast_2d(np.cov(pixels))
        eigvals, eigvecs = np.linalg.eigh(cov)
        alpha = rng.normal(0.0, spec.pca_scale, size=eigvals.shape)
        shift = eigvecs @ (alpha * np.clip(eigvals, 0.0, None))
        out.append(image + torch.from_numpy(shift).to(x.device, x.dtype)[:, None, None])
    return torch.stack(out)


def _pixel_deflection(spec: DistortionSpec, x: torch.Tensor, rng: np.random.Generator):
    out = x.clone()
    height, width = x.shape[-2:]
    half = spec.deflection_window // 2
    for image in out:
        for _ in range(spec.deflections):
            row, col = int(rng.integers(0, height)), int(rng.integers(0, width))
            src_row = int(np.clip(row + rng.integers(-half, half + 1), 0, height - 1))
            src_col = int(np.clip(col + rng.integers(-half, half + 1), 0, width - 1))
            image[:, row, col] = image[:, src_row, src_col]
    return out


def _bit_depth_reduction(spec: DistortionSpec, x: torch.Tensor, _rng: np.random.Generator):
    steps = 2**spec.bit_depth - 1
    return torch.round(x * steps) / steps


_DISTORTIONS: Dict[str, Distortion] = {
    "GB": _gaussian_blur,
    "GN": _gaussian_noise,
    "JPEG": _jpeg,
    "Drop": _drop,
    "MB": _motion_blur,
    "CD": _cutout,
    "FPCA": _fancy_pca,
    "PD": _pixel_deflection,
    "BDR": _bit_depth_reduction,
}


def jpeg_roundtrip(x: torch.Tensor, quality: int) -> torch.Tensor:
    """Byte-exact JFIF encode/decode of every image at ``quality``."""
    out = []
    for image in quantize_8bit(x):
        array = image[0] if image.shape[0] == 1 else np.transpose(image, (1, 2, 0))
        buffer = io.BytesIO()
        Image.fromarray(array).save(buffer, format="JPEG", quality=quality)
        buffer.seek(0)
        with Image.open(buffer) as decoded:
            pixels = np.asarray(decoded, dtype=np.uint8)
        pixels = pixels[None] if pixels.ndim == 2 else np.transpose(pixels, (2, 0, 1))
        out.append(torch.from_numpy(pixels.astype(np.float32) / 255.0))
    return torch.stack(out).to(x.device, x.dtype)


def apply_distortion(spec: DistortionSpec, x: torch.Tensor) -> torch.Tensor:
    """Apply one baseline distortion; output stays in [0, 1] and is seed-deterministic."""
    check_image(x)
    distortion = _DISTORTIONS.get(spec.kind)
    if distortion is None:
        raise ConfigurationError(f"Unsupported distortion kind: {spec.kind}")
    rng = np.random.default_rng(spec.seed)
    with torch.no_grad():
        return distortion(spec, x, rng).clamp(0.0, 1.0)


def lattice_attack(spec: LatticeSpec, c_prime: torch.Tensor) -> torch.Tensor:
    """Replace every pixel at (m, n) with m, n divisible by q+1 by fresh uniform values."""
    check_image(c_prime, "container")
    stride = spec.q + 1
    out = c_prime.clone()
    target = out[:, :, ::stride, ::stride]
    generator = torch.Generator().manual_seed(spec.seed)
    values = torch.rand(target.shape, generator=generator, dtype=torch.float32)
    out[:, :, ::stride, ::stride] = values.to(out.device, out.dtype)
    return out


def lattice_fraction(height: int, width: int, q: int) -> float:
    """Fraction of pixels a lattice attack with gap q modifies."""
    stride = q + 1
    return (-(-height // stride) * -(-width // stride)) / (height * width)
