"""Locality and redundancy probes of a trained revealing network."""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import torch

from stegpurify._util import GeometryError, OutOfRangeIndexError
from stegpurify.hiding import HidingPair, hide, reveal

logger = logging.getLogger(__name__)

PROBE_MODES = ("remove", "keep")
REDUNDANCY_THRESHOLD = 10.0 / 255.0


@dataclass
class LocalityReport:
    """Per-position error maps and their inside/outside aggregation."""

    mode: str
    window: int
    radius: int
    positions: List[Tuple[int, int]]
    error_maps: torch.Tensor
    inside_mean: float
    outside_mean: float

    @property
    def ratio(self) -> float:
        """Concentration of the error on the region the ablation should affect."""
        affected, unaffected = (
            (self.inside_mean, self.outside_mean)
            if self.mode == "remove"
            else (self.outside_mean, self.inside_mean)
        )
        if unaffected == 0:
            return float("inf") if affected > 0 else 0.0
        return affected / unaffected


@dataclass
class RedundancyReport:
    """Spread of the revealed-image change caused by zeroing one container pixel."""

    pixel: Tuple[int, int]
    radius: int | None
    max_change: float
    changed_pixels: int


def receptive_radius(pair: HidingPair) -> int:
    """Analytic receptive-field radius of R (0 for parameter-free stubs)."""
    return int(getattr(pair.reveal_net, "receptive_field_radius", 0))


def _region(height: int, width: int, top: int, left: int, size: int, grow: int) -> torch.Tensor:
    region = torch.zeros((height, width), dtype=torch.bool)
    t0, t1 = max(top - grow, 0), min(top + size + grow, height)
    l0, l1 = max(left - grow, 0), min(left + size + grow, width)
    if t1 > t0 and l1 > l0:
        region[t0:t1, l0:l1] = True
    return region


def _default_positions(
    height: int, width: int, window: int, count: int, seed: int
) -> List[Tuple[int, int]]:
    generator = torch.Generator().manual_seed(seed)
    tops = torch.randint(0, height - window + 1, (count,), generator=generator)
    lefts = torch.randint(0, width - window + 1, (count,), generator=generator)
    return list(zip(tops.tolist(), lefts.tolist()))


def locality_probe(
    pair: HidingPair,
    c: torch.Tensor,
    s: torch.Tensor,
    window: int,
    mode: str = "remove",
    positions: Sequence[Tuple[int, int]] | None = None,
    count: int = 8,
    seed: int = 0,
) -> LocalityReport:
    """Ablate w x w windows of c' and measure where the revealed output changes.

    ``remove`` zeroes the window. ``keep`` zeroes everything else. "Inside" is the window
    grown by the receptive radius for ``remove`` and shrunk by it for ``keep``.
    """
    if mode not in PROBE_MODES:
        raise ValueError(f"Unknown probe mode: {mode}")
    height, width = c.shape[-2:]
    if window < 0 or window > min(height, width):
        raise GeometryError(f"window {window} does not fit a {height}x{width} image")
    radius = receptive_radius(pair)
    c_prime = hide(pair, c, s)
    baseline = reveal(pair, c_prime)

    if window == 0:
        return LocalityReport(mode, 0, radius, [], torch.zeros((0, height, width)), 0.0, 0.0)

    positions = list(positions or _default_positions(height, width, window, count, seed))
    maps, inside_values, outside_values = [], [], []
    for top, left in positions:
        if mode == "remove":
            ablated = c_prime.clone()
            ablated[..., top : top + window, left : left + window] = 0.0
            inside = _region(height, width, top, left, window, radius)
        else:
            ablated = torch.zeros_like(c_prime)
            ablated[..., top : top + window, left : left + window] = c_prime[
                ..., top : top + window, left : left + window
            ]
            inside = _region(height, width, top + radius, left + radius, window - 2 * radius, 0)
        error = (reveal(pair, ablated) - baseline).abs().mean(dim=(0, 1)).cpu()
        maps.append(error)
        inside_values.append(error[inside])
        outside_values.append(error[~inside])

    def mean_of(chunks: List[torch.Tensor]) -> float:
        joined = torch.cat([chunk.flatten() for chunk in chunks])
        return float(joined.mean()) if joined.numel() else 0.0

    report = LocalityReport(
        mode=mode,
        window=window,
        radius=radius,
        positions=positions,
        error_maps=torch.stack(maps),
        inside_mean=mean_of(inside_values),
        outside_mean=mean_of(outside_values),
    )
    logger.info("Locality probe (%s, w=%d): ratio %.2f", mode, window, report.ratio)
    return report


def redundancy_probe(
    pair: HidingPair,
    c_prime: torch.Tensor,
    pixel: Tuple[int, int],
    threshold: float = REDUNDANCY_THRESHOLD,
) -> RedundancyReport:
    """Zero one container pixel and report how far the revealed change spreads."""
    height, width = c_prime.shape[-2:]
    row, col = pixel
    if not (0 <= row < height and 0 <= col < width):
        raise OutOfRangeIndexError(f"pixel {pixel} outside a {height}x{width} image")
    ablated = c_prime.clone()
    ablated[..., row, col] = 0.0
    change = (reveal(pair, ablated) - reveal(pair, c_prime)).abs().amax(dim=(0, 1)).cpu()
    changed = torch.nonzero(change > threshold)
    radius = None
    if len(changed):
        offsets = (changed - torch.tensor([row, col])).abs()
        radius = int(offsets.max())
    return RedundancyReport(
        pixel=(row, col),
        radius=radius,
        max_change=float(change.max()),
        changed_pixels=int(len(changed)),
    )
