"""Image tensors, PNG datasets and the erase-tiling geometry.

Images are float tensors shaped (batch, channels, height, width) with values in [0, 1].
Masks share the layout with a single channel and mark erased pixels with 1.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from stegpurify._util import (
    ConfigurationError,
    GeometryError,
    OutOfRangeIndexError,
    ShapeError,
)

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
MANIFEST_NAME = "manifest.txt"
SPLIT_FRACTIONS = {"train": (0.0, 0.8), "val": (0.8, 0.9), "test": (0.9, 1.0)}
# ITU-R BT.601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def check_image(x: torch.Tensor, name: str = "image") -> torch.Tensor:
    """Validate the image-tensor contract and return the tensor unchanged."""
    if x.dim() != 4:
        raise ShapeError(f"{name} must be (batch, channels, height, width), got {tuple(x.shape)}")
    _, channels, height, width = x.shape
    if channels not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {channels}")
    if height < 8 or width < 8 or height % 8 or width % 8:
        raise ShapeError(f"{name} sides must be multiples of 8, got {height}x{width}")
    if x.numel() and (float(x.min()) < 0.0 or float(x.max()) > 1.0):
        raise ShapeError(f"{name} values must lie in [0, 1]")
    return x


def check_mask(mask: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Validate a binary mask against its companion image."""
    if mask.dim() != 4 or mask.shape[1] != 1:
        raise ShapeError(f"mask must be (batch, 1, height, width), got {tuple(mask.shape)}")
    if mask.shape[-2:] != like.shape[-2:] or mask.shape[0] != like.shape[0]:
        raise ShapeError(
            f"mask {tuple(mask.shape)} does not match image {tuple(like.shape)}"
        )
    if not torch.all((mask == 0) | (mask == 1)):
        raise ShapeError("mask values must be exactly 0 or 1")
    return mask


def check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    """Raise ShapeError unless both tensors share a shape."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def to_luminance(x: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of an RGB batch; grayscale batches pass through."""
    if x.shape[1] == 1:
        return x
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b


def quantize_8bit(x: torch.Tensor) -> np.ndarray:
    """Round a [0,1] tensor onto the 8-bit grid as uint8."""
    return (x.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8).cpu().numpy()


def load_image(path: Path, channels: int = 3, resolution: int | None = None) -> torch.Tensor:
    """Decode one 8-bit file into a (channels, H, W) tensor of value/255."""
    with Image.open(path) as img:
        img = img.convert("RGB" if channels == 3 else "L")
        array = np.asarray(img, dtype=np.uint8)
    tensor = torch.from_numpy(array.astype(np.float32) / 255.0)
    tensor = tensor.permute(2, 0, 1) if tensor.dim() == 3 else tensor.unsqueeze(0)
    if resolution is not None and tuple(tensor.shape[-2:]) != (resolution, resolution):
        tensor = F.interpolate(
            tensor.unsqueeze(0), size=(resolution, resolution), mode="bilinear", align_corners=False
        )[0]
    return tensor.clamp(0.0, 1.0).contiguous()


def save_image(x: torch.Tensor, path: Path) -> Path:
    """Write a single (C, H, W) or (1, C, H, W) tensor as an 8-bit PNG."""
    if x.dim() == 4:
        if x.shape[0] != 1:
            raise ShapeError("save_image writes exactly one image")
        x = x[0]
    array = quantize_8bit(x)
    array = array[0] if array.shape[0] == 1 else np.transpose(array, (1, 2, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")
    return path


def output_pairs(input_path: Path, output_path: Path) -> List[Tuple[Path, Path]]:
    """(source, PNG target) pairs for a file or a directory of images."""
    input_path, output_path = Path(input_path), Path(output_path)
    if input_path.is_dir():
        sources = sorted(p for p in input_path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        return [(src, output_path / f"{src.stem}.png") for src in sources]
    if not input_path.exists():
        raise ConfigurationError(f"Input {input_path} does not exist")
    target = output_path / f"{input_path.stem}.png" if output_path.is_dir() else output_path
    return [(input_path, target)]


@dataclass
class DatasetHandle:
    """Decoded, resized image set with a reproducible index order."""

    root: Path
    split: str
    resolution: int
    seed: int
    channels: int
    files: List[Path]
    images: torch.Tensor
    skipped: List[Path] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.images[index]

    def order(self, seed: int | None = None) -> torch.Tensor:
        """Index permutation, reproducible for a given seed."""
        generator = torch.Generator().manual_seed(self.seed if seed is None else seed)
        return torch.randperm(len(self), generator=generator)

    def batches(
        self, batch_size: int, seed: int | None = None, drop_last: bool = False
    ) -> Iterator[torch.Tensor]:
        """Yield image batches in the seeded order."""
        order = self.order(seed)
        for start in range(0, len(order), batch_size):
            index = order[start : start + batch_size]
            if drop_last and len(index) < batch_size:
                return
            yield self.images[index]

    def sample(self, batch_size: int, generator: torch.Generator) -> torch.Tensor:
        """Random batch drawn with replacement from a caller-owned generator."""
        index = torch.randint(len(self), (batch_size,), generator=generator)
        return self.images[index]

    def sample_pairs(
        self, batch_size: int, generator: torch.Generator
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Random batch plus, for each image, a different image of the set."""
        if len(self) < 2:
            raise ShapeError("need at least two images to draw pairs")
        index = torch.randint(len(self), (batch_size,), generator=generator)
        offset = torch.randint(1, len(self), (batch_size,), generator=generator)
        return self.images[index], self.images[(index + offset) % len(self)]

    def shard(self, index: int, count: int) -> "DatasetHandle":
        """Disjoint strided shard for concurrent workers."""
        if not 0 <= index < count:
            raise OutOfRangeIndexError(f"shard {index} outside [0, {count})")
        keep = list(range(index, len(self), count))
        return DatasetHandle(
            root=self.root,
            split=self.split,
            resolution=self.resolution,
            seed=self.seed,
            channels=self.channels,
            files=[self.files[i] for i in keep],
            images=self.images[keep],
            skipped=list(self.skipped),
        )

    def write_manifest(self, path: Path | None = None) -> Path:
        """Write one root-relative path per line (UTF-8)."""
        path = Path(path or self.root / MANIFEST_NAME)
        lines = [f.relative_to(self.root).as_posix() for f in self.files]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


def _list_files(root: Path) -> List[Path]:
    manifest = root / MANIFEST_NAME
    if manifest.exists():
        entries = manifest.read_text(encoding="utf-8").splitlines()
        return [root / line.strip() for line in entries if line.strip()]
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dataset(
    root: Path, resolution: int, split: str = "train", seed: int = 0, channels: int = 3
) -> DatasetHandle:
    """Decode the split of an image directory into a DatasetHandle."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"Dataset root {root} does not exist")
    if split not in SPLIT_FRACTIONS and split != "all":
        raise ConfigurationError(f"Unknown split: {split}")
    if resolution < 8 or resolution % 8:
        raise ConfigurationError(f"Resolution must be a multiple of 8, got {resolution}")

    files = _list_files(root)
    order = torch.randperm(len(files), generator=torch.Generator().manual_seed(seed)).tolist()
    if split != "all":
        low, high = SPLIT_FRACTIONS[split]
        order = order[int(round(low * len(files))) : int(round(high * len(files)))]
        order.sort()
    chosen = [files[i] for i in order]

    decoded: List[torch.Tensor] = []
    kept: List[Path] = []
    skipped: List[Path] = []
    for path in chosen:
        try:
            decoded.append(load_image(path, channels=channels, resolution=resolution))
            kept.append(path)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            logger.warning("Skipping undecodable image %s: %s", path, exc)
            skipped.append(path)

    images = (
        torch.stack(decoded)
        if decoded
        else torch.zeros((0, channels, resolution, resolution), dtype=torch.float32)
    )
    logger.info("Loaded %d %s images from %s (%d skipped)", len(kept), split, root, len(skipped))
    return DatasetHandle(
        root=root,
        split=split,
        resolution=resolution,
        seed=seed,
        channels=channels,
        files=kept,
        images=images,
        skipped=skipped,
    )


@dataclass(frozen=True)
class EraseSchedule:
    """Tiling plan: which k x k cells are erased on which pass."""

    height: int
    width: int
    k: int
    d: int
    start: Tuple[int, int]
    passes: Tuple[Tuple[int, int], ...]
    grid: Tuple[int, int]

    @property
    def pass_count(self) -> int:
        """Number of passes, (d + 1) squared."""
        return len(self.passes)

    def cells(self, pass_index: int) -> List[Tuple[int, int]]:
        """Grid cells (row, col) selected on a pass."""
        if not 0 <= pass_index < self.pass_count:
            raise OutOfRangeIndexError(
                f"pass index {pass_index} outside [0, {self.pass_count})"
            )
        offset_row, offset_col = self.passes[pass_index]
        stride = self.d + 1
        m, n = self.start
        return [
            (row, col)
            for row in range(self.grid[0])
            if (row - m) % stride == offset_row
            for col in range(self.grid[1])
            if (col - n) % stride == offset_col
        ]

    def tile_bounds(self, cell: Tuple[int, int]) -> Tuple[int, int, int, int]:
        """Pixel bounds (top, bottom, left, right) of a cell, clipped to the image."""
        row, col = cell
        top, left = row * self.k, col * self.k
        return top, min(top + self.k, self.height), left, min(left + self.k, self.width)


def make_erase_schedule(
    height: int, width: int, k: int, d: int, start: Tuple[int, int] = (0, 0)
) -> EraseSchedule:
    """Build the (d+1)^2-pass tiling for an image of the given size."""
    if k < 1 or k > min(height, width):
        raise GeometryError(f"tile size {k} must lie in [1, {min(height, width)}]")
    if d < 0:
        raise GeometryError(f"gap d must be non-negative, got {d}")
    grid = (math.ceil(height / k), math.ceil(width / k))
    if d + 1 > min(grid):
        raise GeometryError(f"d + 1 = {d + 1} exceeds the {grid[0]}x{grid[1]} tile grid")
    m, n = start
    if not (0 <= m <= d and 0 <= n <= d):
        raise GeometryError(f"start {start} must lie in [0, {d}]")
    passes = tuple((a, b) for a in range(d + 1) for b in range(d + 1))
    return EraseSchedule(
        height=height, width=width, k=k, d=d, start=(m, n), passes=passes, grid=grid
    )


def mask_from_pass(schedule: EraseSchedule, pass_index: int, batch: int = 1) -> torch.Tensor:
    """Binary mask (batch, 1, H, W) with ones on the tiles of one pass."""
    mask = torch.zeros((1, 1, schedule.height, schedule.width), dtype=torch.float32)
    for cell in schedule.cells(pass_index):
        top, bottom, left, right = schedule.tile_bounds(cell)
        mask[..., top:bottom, left:right] = 1.0
    return mask.expand(batch, -1, -1, -1).contiguous()


def pass_masks(schedule: EraseSchedule, batch: int = 1) -> torch.Tensor:
    """All pass masks stacked as (passes, batch, 1, H, W)."""
    return torch.stack([mask_from_pass(schedule, i, batch) for i in range(schedule.pass_count)])
