"""Canny edge and superpixel colour labels for the auxiliary generators, with a disk cache."""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import joblib
import numpy as np
import torch
from skimage.feature import canny
from skimage.segmentation import slic

from stegpurify._util import ConfigurationError
from stegpurify.image_core import quantize_8bit, to_luminance

logger = logging.getLogger(__name__)

CANNY_THRESHOLDS = (0.1, 0.2)
SLIC_SEGMENTS_AT_256 = 200
SLIC_COMPACTNESS = 10.0


@dataclass
class LabelPair:
    """Edge label e^r, colour label m^r and the segment partition behind m^r."""

    edges: torch.Tensor
    colors: torch.Tensor
    segments: torch.Tensor


def default_slic_segments(height: int, width: int) -> int:
    """200 segments at 256x256, scaled by image area."""
    return max(1, int(round(SLIC_SEGMENTS_AT_256 * height * width / (256 * 256))))


def canny_labels(
    x: torch.Tensor,
    low: float = CANNY_THRESHOLDS[0],
    high: float = CANNY_THRESHOLDS[1],
    sigma: float = 1.0,
) -> torch.Tensor:
    """Binary Canny edge map (batch, 1, H, W) of the image luminance."""
    if not 0.0 <= low < high <= 1.0:
        raise ConfigurationError(
            f"Canny thresholds must satisfy 0 <= low < high <= 1, got {low}, {high}"
        )
    luminance = to_luminance(x.detach()).double().cpu().numpy()[:, 0]
    edges = [
        canny(image, sigma=sigma, low_threshold=low, high_threshold=high) for image in luminance
    ]
    return torch.from_numpy(np.stack(edges)[:, None].astype(np.float32)).to(x.device)


def _segment_means(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Fill each segment with its mean colour; constant segments stay exact."""
    flat_labels = labels.ravel()
    count = int(flat_labels.max()) + 1
    sizes = np.bincount(flat_labels, minlength=count).astype(np.float64)
    channels = image.reshape(image.shape[0], -1)
    reference = channels[:, 0:1]
    filled = np.empty_like(channels)
    for c, (values, ref) in enumerate(zip(channels, reference)):
        sums = np.bincount(flat_labels, weights=values - ref[0], minlength=count)
        means = sums / np.maximum(sizes, 1.0) + ref[0]
        filled[c] = means[flat_labels]
    return filled.reshape(image.shape)


def slic_color_labels(
    x: torch.Tensor, segments: int | None = None, compactness: float = SLIC_COMPACTNESS
) -> Tuple[torch.Tensor, torch.Tensor]:
    """SLIC superpixels filled with their mean colour.

    Returns the colour map (batch, C, H, W) and the segment index map (batch, H, W).
    """
    height, width = x.shape[-2:]
    segments = segments or default_slic_segments(height, width)
    if segments < 1 or segments > height * width:
        raise ConfigurationError(f"segments must lie in [1, {height * width}], got {segments}")
    images = x.detach().double().cpu().numpy()
    colors: List[np.ndarray] = []
    partitions: List[np.ndarray] = []
    for image in images:
        if segments == 1:
            labels = np.zeros((height, width), dtype=np.int64)
        elif image.shape[0] == 3:
            labels = slic(
                np.transpose(image, (1, 2, 0)),
                n_segments=segments,
                compactness=compactness,
                start_label=0,
                channel_axis=-1,
            )
        else:
            labels = slic(
                image[0],
                n_segments=segments,
                compactness=compactness,
                start_label=0,
                channel_axis=None,
            )
        labels = labels.astype(np.int64)
        colors.append(_segment_means(image, labels))
        partitions.append(labels)
    color_map = torch.from_numpy(np.stack(colors)).to(x.dtype).clamp(0.0, 1.0)
    return color_map.to(x.device), torch.from_numpy(np.stack(partitions))


class LabelCache:
    """Per-image label pairs stored as joblib files keyed by an md5 of the 8-bit pixels."""

    def __init__(
        self,
        cache_dir: Path | None,
        canny_thresholds: Tuple[float, float] = CANNY_THRESHOLDS,
        segments: int | None = None,
        compactness: float = SLIC_COMPACTNESS,
    ):
        self.cache_dir = Path(cache_dir) / "labels" if cache_dir else None
        self.canny_thresholds = tuple(canny_thresholds)
        self.segments = segments
        self.compactness = compactness
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def _key(self, image: torch.Tensor) -> str:
        hasher = hashlib.md5()
        hasher.update(quantize_8bit(image).tobytes())
        hasher.update(str(tuple(image.shape)).encode())
        hasher.update(repr((self.canny_thresholds, self.segments, self.compactness)).encode())
        return hasher.hexdigest()

    def _compute(self, image: torch.Tensor) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        edges = canny_labels(image[None], *self.canny_thresholds)
        colors, segments = slic_color_labels(image[None], self.segments, self.compactness)
        return edges[0].cpu().numpy(), colors[0].cpu().numpy(), segments[0].numpy()

    def labels(self, batch: torch.Tensor) -> LabelPair:
        """Label pair for every image in the batch, reusing cached entries."""
        edges, colors, segments = [], [], []
        for image in batch:
            path = self.cache_dir / f"{self._key(image)}.joblib" if self.cache_dir else None
            entry = None
            if path is not None and path.exists():
                try:
                    entry = joblib.load(path)
                except (OSError, EOFError, ValueError) as exc:
                    logger.warning("Failed to load cached labels %s: %s", path, exc)
            if entry is None:
                entry = self._compute(image)
                if path is not None:
                    joblib.dump(entry, path)
            edges.append(torch.from_numpy(entry[0]))
            colors.append(torch.from_numpy(entry[1]))
            segments.append(torch.from_numpy(entry[2]))
        return LabelPair(
            edges=torch.stack(edges).to(batch.device, batch.dtype),
            colors=torch.stack(colors).to(batch.device, batch.dtype),
            segments=torch.stack(segments),
        )
