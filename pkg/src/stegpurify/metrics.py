"""Image-quality and secret-recovery metrics and the C/S report rows built from them.

Metrics take two image batches of equal shape and return the mean of the per-image values.
PSNR is capped at 100 dB. SSIM and VIF run on BT.601 luminance. BER and PER run on the
8-bit quantised values.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np
import piq
import torch
from skimage.metrics import structural_similarity

from stegpurify._util import GeometryError, ShapeError
from stegpurify.image_core import check_same_shape, quantize_8bit, to_luminance

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
VIF_MIN_SIDE = 41
BER_ENCODINGS = ("binarized", "bytes")
DEFAULT_PER_THRESHOLDS = (0, 5, 10)
CSV_SCHEMA_VERSION = 1


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    check_same_shape(a, b)
    if a.dim() != 4:
        raise ShapeError(f"expected (batch, channels, height, width), got {tuple(a.shape)}")


def psnr_per_image(a: torch.Tensor, b: torch.Tensor) -> List[float]:
    """PSNR of each image pair in dB, capped at 100."""
    _check_pair(a, b)
    diff = a.detach().double() - b.detach().double()
    mse = diff.pow(2).flatten(1).mean(dim=1)
    return [PSNR_CAP if m == 0 else min(PSNR_CAP, 10.0 * math.log10(1.0 / m)) for m in mse.tolist()]


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean PSNR over the batch."""
    return float(np.mean(psnr_per_image(a, b)))


def ssim_per_image(
    a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW, k1: float = 0.01, k2: float = 0.03
) -> List[float]:
    """Unclamped mean local SSIM of each image pair (Gaussian window, sigma 1.5)."""
    _check_pair(a, b)
    if min(a.shape[-2:]) < window:
        raise GeometryError(f"image {tuple(a.shape[-2:])} is smaller than the {window}px window")
    lum_a = to_luminance(a.detach()).double().cpu().numpy()[:, 0]
    lum_b = to_luminance(b.detach()).double().cpu().numpy()[:, 0]
    return [
        float(
            structural_similarity(
                x,
                y,
                win_size=window,
                gaussian_weights=True,
                sigma=SSIM_SIGMA,
                use_sample_covariance=False,
                data_range=1.0,
                K1=k1,
                K2=k2,
            )
        )
        for x, y in zip(lum_a, lum_b)
    ]


def ssim(
    a: torch.Tensor, b: torch.Tensor, window: int = SSIM_WINDOW, k1: float = 0.01, k2: float = 0.03
) -> float:
    """Mean SSIM over the batch (may be negative; reports clamp)."""
    return float(np.mean(ssim_per_image(a, b, window, k1, k2)))


def vif_per_image(reference: torch.Tensor, test: torch.Tensor) -> List[float]:
    """Pixel-domain VIF of each pair, reference first, clamped to [0, 1]."""
    _check_pair(reference, test)
    if min(reference.shape[-2:]) < VIF_MIN_SIDE:
        raise GeometryError(f"VIF needs images of at least {VIF_MIN_SIDE}px")
    ref = to_luminance(reference.detach()).float().clamp(0.0, 1.0)
    tst = to_luminance(test.detach()).float().clamp(0.0, 1.0)
    values = []
    for r, t in zip(ref, tst):
        if torch.equal(r, t):
            values.append(1.0)
        elif float(r.max() - r.min()) == 0.0:
            values.append(0.0)
        else:
            score = piq.vif_p(t[None], r[None], data_range=1.0, reduction="none")
            values.append(float(torch.nan_to_num(score, nan=0.0).clamp(0.0, 1.0)))
    return values


def vif(reference: torch.Tensor, test: torch.Tensor) -> float:
    """Mean VIF over the batch. Not symmetric: the reference comes first."""
    return float(np.mean(vif_per_image(reference, test)))


def _bits(x: torch.Tensor, encoding: str) -> np.ndarray:
    values = quantize_8bit(x)
    if encoding == "binarized":
        return (values >= 128).astype(np.uint8).ravel()
    if encoding == "bytes":
        return np.unpackbits(values.ravel())
    raise ShapeError(f"Unknown BER encoding: {encoding}")


def ber(a: torch.Tensor, b: torch.Tensor, encoding: str = "binarized") -> float:
    """Bit error rate N_be / N_b between the bitstreams of two images."""
    _check_pair(a, b)
    bits_a, bits_b = _bits(a, encoding), _bits(b, encoding)
    return float(np.count_nonzero(bits_a != bits_b)) / bits_a.size


def per(a: torch.Tensor, b: torch.Tensor, xi: int = 0) -> float:
    """Fraction of channel values whose 8-bit difference is strictly greater than ``xi``."""
    _check_pair(a, b)
    if xi < 0:
        raise ValueError("PER threshold must be non-negative")
    diff = np.abs(quantize_8bit(a).astype(np.int16) - quantize_8bit(b).astype(np.int16))
    return float(np.count_nonzero(diff > xi)) / diff.size


@dataclass
class MetricReportRow:  # pylint: disable=too-many-instance-attributes
    """Averaged metrics for one (scheme, attack) cell."""

    scheme: str
    attack: str
    config: str = ""
    psnr_c: float = 0.0
    psnr_s: float = 0.0
    ssim_c: float = 0.0
    ssim_s: float = 0.0
    vif_c: float = 0.0
    vif_s: float = 0.0
    ber_binarized: float = 0.0
    ber_bytes: float = 0.0
    per: Dict[int, float] = field(default_factory=dict)
    samples: int = 0
    quality_budget: float | None = None

    @property
    def feasible(self) -> bool | None:
        """Whether the attack kept PSNR-C at or above the quality budget."""
        if self.quality_budget is None:
            return None
        return self.psnr_c >= self.quality_budget

    def columns(self) -> List[str]:
        """CSV header for this row."""
        return row_columns(sorted(self.per))

    def to_record(self) -> Dict[str, str]:
        """Fixed-precision strings keyed by column name."""
        record = {
            "schema_version": str(CSV_SCHEMA_VERSION),
            "scheme": self.scheme,
            "attack": self.attack,
            "config": self.config,
        }
        for name in METRIC_FIELDS:
            record[name] = f"{getattr(self, name):.6f}"
        for xi in sorted(self.per):
            record[f"per_{xi}"] = f"{self.per[xi]:.6f}"
        record["samples"] = str(self.samples)
        record["quality_budget"] = "" if self.quality_budget is None else f"{self.quality_budget:g}"
        record["feasible"] = "" if self.feasible is None else str(self.feasible).lower()
        return record

    @classmethod
    def from_record(cls, record: Dict[str, str]) -> "MetricReportRow":
        """Inverse of to_record."""
        per_values = {
            int(key[4:]): float(value) for key, value in record.items() if key.startswith("per_")
        }
        budget = record.get("quality_budget") or None
        return cls(
            scheme=record["scheme"],
            attack=record["attack"],
            config=record.get("config", ""),
            per=per_values,
            samples=int(record["samples"]),
            quality_budget=None if budget is None else float(budget),
            **{name: float(record[name]) for name in METRIC_FIELDS},
        )


METRIC_FIELDS = (
    "psnr_c",
    "psnr_s",
    "ssim_c",
    "ssim_s",
    "vif_c",
    "vif_s",
    "ber_binarized",
    "ber_bytes",
)


def row_columns(thresholds: Sequence[int] = DEFAULT_PER_THRESHOLDS) -> List[str]:
    """Column order of the report CSV."""
    return (
        ["schema_version", "scheme", "attack", "config"]
        + list(METRIC_FIELDS)
        + [f"per_{xi}" for xi in thresholds]
        + ["samples", "quality_budget", "feasible"]
    )


def report(
    scheme: str,
    attack: str,
    containers_before: torch.Tensor,
    containers_after: torch.Tensor,
    secrets_before: torch.Tensor,
    secrets_after: torch.Tensor,
    thresholds: Iterable[int] = DEFAULT_PER_THRESHOLDS,
    quality_budget: float | None = None,
    config: str = "",
) -> MetricReportRow:
    """Average every metric over aligned container and secret batches."""
    _check_pair(containers_before, containers_after)
    _check_pair(secrets_before, secrets_after)
    if containers_before.shape[0] != secrets_before.shape[0]:
        raise ShapeError("container and secret batches are misaligned")

    def clamped_mean(values: List[float]) -> float:
        return float(np.mean(np.clip(values, 0.0, 1.0)))

    return MetricReportRow(
        scheme=scheme,
        attack=attack,
        config=config,
        psnr_c=psnr(containers_before, containers_after),
        psnr_s=psnr(secrets_before, secrets_after),
        ssim_c=clamped_mean(ssim_per_image(containers_before, containers_after)),
        ssim_s=clamped_mean(ssim_per_image(secrets_before, secrets_after)),
        vif_c=clamped_mean(vif_per_image(containers_before, containers_after)),
        vif_s=clamped_mean(vif_per_image(secrets_before, secrets_after)),
        ber_binarized=ber(secrets_before, secrets_after, "binarized"),
        ber_bytes=ber(secrets_before, secrets_after, "bytes"),
        per={xi: per(secrets_before, secrets_after, xi) for xi in thresholds},
        samples=int(containers_before.shape[0]),
        quality_budget=quality_budget,
    )


def write_rows_csv(rows: Sequence[MetricReportRow], path: Path) -> Path:
    """Write rows with the fixed column order."""
    thresholds = sorted({xi for row in rows for xi in row.per}) or list(DEFAULT_PER_THRESHOLDS)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=row_columns(thresholds), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row.to_record())
    return path


def read_rows_csv(path: Path) -> List[MetricReportRow]:
    """Read rows written by write_rows_csv."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        return [MetricReportRow.from_record(dict(record)) for record in reader]
