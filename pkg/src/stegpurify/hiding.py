"""Deep hiding schemes (DDH and UDH) and their training loops."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from stegpurify._util import (
    ConfigurationError,
    ShapeError,
    TrainingDivergedError,
    select_device,
)
from stegpurify.checkpoint import load_checkpoint, restore_module, save_checkpoint
from stegpurify.hiding_models import HidingNet, NoiseAutoencoder, RevealNet, scaled_width
from stegpurify.image_core import DatasetHandle, check_image, check_same_shape, to_luminance
from stegpurify.noise_layers import NoiseLayer, NoiseLayerConfig
from stegpurify.schema import SchemaConfig, is_int, is_non_negative, is_positive, one_of

logger = logging.getLogger(__name__)

META_ARCHS = ("DDH", "UDH")
BASE_WIDTH = 64


@dataclass
class HidingTrainConfig(SchemaConfig):  # pylint: disable=too-many-instance-attributes
    """Training settings for a hiding pair.

    ``target_psnr_c``/``target_psnr_s`` are reporting thresholds only and never enforced.
    """

    cover_weight: float = 1.0
    secret_weight: float = 0.75
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.5, 0.999)
    steps: int = 20000
    batch_size: int = 16
    noise: NoiseLayerConfig = field(default_factory=NoiseLayerConfig)
    seed: int = 0
    log_every: int = 500
    binarize_secret: bool = False
    target_psnr_c: float = 30.0
    target_psnr_s: float = 28.0

    SCHEMA = {
        "cover_weight": is_positive,
        "secret_weight": is_positive,
        "learning_rate": is_positive,
        "betas": lambda v: isinstance(v, tuple) and len(v) == 2 and all(0 <= b < 1 for b in v),
        "steps": lambda v: is_int(v) and v >= 0,
        "batch_size": lambda v: is_int(v) and v >= 1,
        "noise": lambda v: isinstance(v, NoiseLayerConfig),
        "seed": is_int,
        "log_every": lambda v: is_int(v) and v >= 1,
        "binarize_secret": lambda v: isinstance(v, bool),
        "target_psnr_c": is_non_negative,
        "target_psnr_s": is_non_negative,
    }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "HidingTrainConfig":
        raw = dict(raw)
        if isinstance(raw.get("noise"), dict):
            raw["noise"] = NoiseLayerConfig.from_dict(raw["noise"])
        return super().from_dict(raw)

    def to_dict(self) -> Dict[str, Any]:
        out = super().to_dict()
        out["noise"] = self.noise.to_dict()
        return out


@dataclass
class HidingPair:
    """Hiding network H and revealing network R for one meta-architecture."""

    meta_arch: str
    hiding_net: nn.Module
    reveal_net: nn.Module
    resolution: int
    secret_channels: int
    cover_channels: int = 3
    width_scale: float = 0.5
    train_log: Dict[str, Any] = field(default_factory=dict)

    def eval(self) -> "HidingPair":
        """Switch both networks to inference mode."""
        self.hiding_net.eval()
        self.reveal_net.eval()
        return self

    def to(self, device: torch.device) -> "HidingPair":
        """Move both networks to a device."""
        self.hiding_net.to(device)
        self.reveal_net.to(device)
        return self

    @property
    def device(self) -> torch.device:
        """Device holding the revealing network."""
        return next(self.reveal_net.parameters()).device

    def hparams(self) -> Dict[str, Any]:
        """Constructor arguments, stored in checkpoints."""
        return {
            "meta_arch": self.meta_arch,
            "resolution": self.resolution,
            "secret_channels": self.secret_channels,
            "cover_channels": self.cover_channels,
            "width_scale": self.width_scale,
            "reveal_depth": getattr(self.reveal_net, "depth", 6),
        }


def build_hiding_pair(
    meta_arch: str,
    resolution: int,
    secret_channels: int = 3,
    width_scale: float = 0.5,
    cover_channels: int = 3,
    reveal_depth: int = 6,
) -> HidingPair:
    """Untrained hiding pair for the chosen meta-architecture."""
    if meta_arch not in META_ARCHS:
        raise ConfigurationError(f"Unsupported meta-architecture: {meta_arch}")
    if resolution < 8 or resolution % 8:
        raise ConfigurationError(f"Resolution must be a multiple of 8, got {resolution}")
    if width_scale <= 0:
        raise ConfigurationError("width_scale must be positive")
    if secret_channels not in (1, 3) or cover_channels not in (1, 3):
        raise ConfigurationError("Channel counts must be 1 or 3")

    base = scaled_width(BASE_WIDTH, width_scale)
    if meta_arch == "UDH":
        hiding_net = HidingNet(secret_channels, cover_channels, base, residual=True)
    else:
        in_channels = cover_channels + secret_channels
        hiding_net = HidingNet(in_channels, cover_channels, base, residual=False)
    reveal_net = RevealNet(cover_channels, secret_channels, base, depth=reveal_depth)
    return HidingPair(
        meta_arch=meta_arch,
        hiding_net=hiding_net,
        reveal_net=reveal_net,
        resolution=resolution,
        secret_channels=secret_channels,
        cover_channels=cover_channels,
        width_scale=width_scale,
    )


def _check_pair_inputs(pair: HidingPair, c: torch.Tensor, s: torch.Tensor) -> None:
    check_image(c, "cover")
    check_image(s, "secret")
    if c.shape[0] != s.shape[0]:
        raise ShapeError(f"batch sizes differ: {c.shape[0]} covers vs {s.shape[0]} secrets")
    if c.shape[1] != pair.cover_channels or s.shape[1] != pair.secret_channels:
        raise ShapeError(
            f"pair expects {pair.cover_channels}-channel covers and "
            f"{pair.secret_channels}-channel secrets"
        )
    if c.shape[-2:] != s.shape[-2:]:
        raise ShapeError("cover and secret sizes differ")


def _hide(pair: HidingPair, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    if pair.meta_arch == "UDH":
        return (c + pair.hiding_net(s)).clamp(0.0, 1.0)
    return pair.hiding_net(torch.cat([c, s], dim=1)).clamp(0.0, 1.0)


def hide(pair: HidingPair, c: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Container c' = H(c, s); for UDH clamp(c + H(s))."""
    _check_pair_inputs(pair, c, s)
    with torch.no_grad():
        return _hide(pair, c, s)


def reveal(pair: HidingPair, x: torch.Tensor) -> torch.Tensor:
    """Revealed secret s' = R(x)."""
    check_image(x, "container")
    if x.shape[1] != pair.cover_channels:
        raise ShapeError(f"pair expects {pair.cover_channels}-channel containers")
    with torch.no_grad():
        return pair.reveal_net(x)


def make_secret_batch(
    covers: torch.Tensor,
    secret_channels: int,
    binarize: bool = False,
    shift: int = 1,
    partners: torch.Tensor | None = None,
) -> torch.Tensor:
    """Secrets as a derangement of the cover batch (cyclic shift).

    ``partners`` replaces the shift with images already paired to each cover, as drawn by
    ``DatasetHandle.sample_pairs``. One-channel secrets use BT.601 luminance.
    ``binarize`` thresholds at 128/255.
    """
    if partners is not None:
        check_same_shape(covers, partners)
        secrets = partners
    elif covers.shape[0] < 2:
        raise ShapeError("need at least two images to draw secrets from other images")
    else:
        secrets = torch.roll(covers, shifts=shift % covers.shape[0] or 1, dims=0)
    if secret_channels == 1:
        secrets = to_luminance(secrets)
    if binarize:
        secrets = (torch.round(secrets * 255.0) >= 128).to(secrets.dtype)
    return secrets


def _diverged(
    pair: HidingPair, step: int, losses: Dict[str, List[float]], checkpoint_dir: Path | None
) -> TrainingDivergedError:
    path = None
    if checkpoint_dir is not None:
        path = save_checkpoint(
            Path(checkpoint_dir) / f"diverged_hiding_step{step}.joblib",
            "diagnostic",
            pair.hparams(),
            {"hiding_net": pair.hiding_net, "reveal_net": pair.reveal_net},
            log={"step": step, **losses},
        )
    return TrainingDivergedError(f"Hiding loss became non-finite at step {step}", path)


def train_hiding(
    pair: HidingPair,
    data: DatasetHandle,
    cfg: HidingTrainConfig,
    device: torch.device | None = None,
    checkpoint_dir: Path | None = None,
) -> HidingPair:
    """Minimise w1*MSE(c, c') + w2*MSE(s, R(noise(c'))) with Adam."""
    if len(data) < 2:
        raise ConfigurationError("Hiding training needs at least two images")
    device = device or select_device()
    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    noise = NoiseLayer(cfg.noise, seed=cfg.seed + 1)
    pair.to(device)
    params = list(pair.hiding_net.parameters()) + list(pair.reveal_net.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas)
    losses: Dict[str, List[float]] = {"step": [], "cover": [], "secret": [], "total": []}

    pair.hiding_net.train()
    pair.reveal_net.train()
    for step in range(1, cfg.steps + 1):
        covers, partners = data.sample_pairs(cfg.batch_size, generator)
        covers = covers.to(device)
        secrets = make_secret_batch(
            covers, pair.secret_channels, cfg.binarize_secret, partners=partners.to(device)
        )
        containers = _hide(pair, covers, secrets)
        revealed = pair.reveal_net(noise(containers))
        cover_loss = F.mse_loss(containers, covers)
        secret_loss = F.mse_loss(revealed, secrets)
        total = cfg.cover_weight * cover_loss + cfg.secret_weight * secret_loss
        if not math.isfinite(float(total)):
            raise _diverged(pair, step, losses, checkpoint_dir)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        if step % cfg.log_every == 0 or step == cfg.steps:
            losses["step"].append(step)
            losses["cover"].append(float(cover_loss))
            losses["secret"].append(float(secret_loss))
            losses["total"].append(float(total))
            logger.info(
                "%s step %d: cover %.5f secret %.5f", pair.meta_arch, step, cover_loss, secret_loss
            )

    pair.train_log = {"losses": losses, "config": cfg.to_dict()}
    return pair.eval()


def save_hiding_pair(pair: HidingPair, path: Path) -> Path:
    """Write a hiding_pair checkpoint."""
    return save_checkpoint(
        path,
        "hiding_pair",
        pair.hparams(),
        {"hiding_net": pair.hiding_net, "reveal_net": pair.reveal_net},
        config=pair.train_log.get("config", {}),
        log=pair.train_log,
    )


def load_hiding_pair(path: Path, device: torch.device | None = None) -> HidingPair:
    """Rebuild a trained pair from its checkpoint."""
    payload = load_checkpoint(path, "hiding_pair")
    pair = build_hiding_pair(**payload["hparams"])
    restore_module(pair.hiding_net, payload["state"]["hiding_net"])
    restore_module(pair.reveal_net, payload["state"]["reveal_net"])
    pair.train_log = payload["log"]
    return pair.to(device or torch.device("cpu")).eval()


@dataclass
class AutoencoderTrainConfig(SchemaConfig):
    """Pre-training settings for the AE noise layer."""

    base: int = 32
    learning_rate: float = 1e-3
    steps: int = 5000
    batch_size: int = 16
    target_psnr: float = 30.0
    seed: int = 0
    log_every: int = 500

    SCHEMA = {
        "base": lambda v: is_int(v) and v >= 1,
        "learning_rate": is_positive,
        "steps": lambda v: is_int(v) and v >= 0,
        "batch_size": lambda v: is_int(v) and v >= 1,
        "target_psnr": is_positive,
        "seed": is_int,
        "log_every": lambda v: is_int(v) and v >= 1,
    }


def train_noise_autoencoder(
    data: DatasetHandle,
    cfg: AutoencoderTrainConfig,
    path: Path,
    device: torch.device | None = None,
) -> NoiseAutoencoder:
    """Pre-train the AE noise layer on covers, write its checkpoint and return it frozen.

    Training stops early once the reconstruction PSNR reaches ``cfg.target_psnr``.
    """
    device = device or select_device()
    torch.manual_seed(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    model = NoiseAutoencoder(channels=data.channels, base=cfg.base).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    history: List[float] = []
    psnr = 0.0
    for step in range(1, cfg.steps + 1):
        batch = data.sample(cfg.batch_size, generator).to(device)
        loss = F.mse_loss(model(batch), batch)
        if not math.isfinite(float(loss)):
            raise TrainingDivergedError(f"Autoencoder loss became non-finite at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        psnr = 10.0 * math.log10(1.0 / max(float(loss), 1e-10))
        if step % cfg.log_every == 0:
            history.append(psnr)
            logger.info("AE step %d: reconstruction %.2f dB", step, psnr)
        if psnr >= cfg.target_psnr:
            logger.info("AE reached %.2f dB at step %d", psnr, step)
            break
    if psnr < cfg.target_psnr:
        logger.warning("AE finished at %.2f dB, below the %.1f dB target", psnr, cfg.target_psnr)

    model.eval()
    save_checkpoint(
        path,
        "noise_autoencoder",
        {"channels": data.channels, "base": cfg.base},
        {"autoencoder": model},
        config=cfg.to_dict(),
        log={"psnr": history, "final_psnr": psnr},
    )
    for param in model.parameters():
        param.requires_grad_(False)
    return model
