"""Erase-and-repair purification: training the ensemble and running the multi-pass loop.

Everything here works from cover images and containers only. No module in this file reads
a hiding checkpoint or calls a revealing network.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from stegpurify._util import ConfigurationError, TrainingDivergedError, select_device
from stegpurify.checkpoint import load_checkpoint, restore_module, save_checkpoint
from stegpurify.ebra_labels import CANNY_THRESHOLDS, SLIC_COMPACTNESS, LabelCache
from stegpurify.ebra_losses import (
    discriminator_loss,
    feature_matching_loss,
    generator_adversarial_loss,
    perceptual_loss,
    reconstruction_loss,
)
from stegpurify.ebra_models import (
    TAP_NAMES,
    VGG_LAYERS,
    AuxiliaryGenerator,
    InpaintingNet,
    PatchDiscriminator,
    PerceptualExtractor,
)
from stegpurify.image_core import (
    DatasetHandle,
    EraseSchedule,
    check_image,
    check_mask,
    make_erase_schedule,
    mask_from_pass,
    pass_masks,
    to_luminance,
)
from stegpurify.schema import SchemaConfig, is_int, is_positive

logger = logging.getLogger(__name__)


def _is_betas(val) -> bool:
    return isinstance(val, tuple) and len(val) == 2 and all(0 <= b < 1 for b in val)


@dataclass
class EbraTrainConfig(SchemaConfig):  # pylint: disable=too-many-instance-attributes
    """Settings for all three training stages."""

    k: int = 16
    d: int = 2
    use_auxiliary: bool = True
    base: int = 32
    disc_base: int = 32
    lambda_fm: float = 10.0
    lambda_rec: float = 10.0
    lambda_per: float = 1.0
    learning_rate: float = 1e-4
    disc_learning_rate: float = 4e-4
    betas: Tuple[float, float] = (0.0, 0.9)
    edge_steps: int = 5000
    color_steps: int = 5000
    inpaint_steps: int = 20000
    batch_size: int = 8
    canny_low: float = CANNY_THRESHOLDS[0]
    canny_high: float = CANNY_THRESHOLDS[1]
    slic_segments: int = 0
    slic_compactness: float = SLIC_COMPACTNESS
    perceptual_layers: Tuple[str, ...] = tuple(VGG_LAYERS)
    pretrained_perceptual: bool = True
    seed: int = 0
    log_every: int = 500

    SCHEMA = {
        "k": lambda v: is_int(v) and v >= 1,
        "d": lambda v: is_int(v) and v >= 0,
        "use_auxiliary": lambda v: isinstance(v, bool),
        "base": lambda v: is_int(v) and v >= 1,
        "disc_base": lambda v: is_int(v) and v >= 1,
        "lambda_fm": is_positive,
        "lambda_rec": is_positive,
        "lambda_per": is_positive,
        "learning_rate": is_positive,
        "disc_learning_rate": is_positive,
        "betas": _is_betas,
        "edge_steps": lambda v: is_int(v) and v >= 0,
        "color_steps": lambda v: is_int(v) and v >= 0,
        "inpaint_steps": lambda v: is_int(v) and v >= 0,
        "batch_size": lambda v: is_int(v) and v >= 1,
        "canny_low": lambda v: isinstance(v, (int, float)) and 0 <= v <= 1,
        "canny_high": lambda v: isinstance(v, (int, float)) and 0 <= v <= 1,
        "slic_segments": lambda v: is_int(v) and v >= 0,
        "slic_compactness": is_positive,
        "perceptual_layers": lambda v: bool(v) and all(name in VGG_LAYERS for name in v),
        "pretrained_perceptual": lambda v: isinstance(v, bool),
        "seed": is_int,
        "log_every": lambda v: is_int(v) and v >= 1,
    }

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.canny_low >= self.canny_high:
            raise ConfigurationError("canny_low must be below canny_high")


@dataclass
class EbraEnsemble:  # pylint: disable=too-many-instance-attributes
    """Edge generator I1, colour generator I2 and inpainting model I3 for one (k, d)."""

    inpainter: InpaintingNet
    edge_generator: AuxiliaryGenerator | None
    color_generator: AuxiliaryGenerator | None
    k: int
    d: int
    resolution: int
    channels: int = 3
    base: int = 32
    train_log: Dict[str, Any] = field(default_factory=dict)

    @property
    def use_auxiliary(self) -> bool:
        """False for the inpainting-only ablation."""
        return self.edge_generator is not None

    @property
    def fusion_taps(self) -> Tuple[str, ...]:
        """Generator layers whose feature maps feed the inpainting model."""
        return TAP_NAMES if self.use_auxiliary else ()

    def modules(self) -> Dict[str, nn.Module]:
        """Trained networks keyed by checkpoint name."""
        named: Dict[str, nn.Module] = {"inpainter": self.inpainter}
        if self.edge_generator is not None and self.color_generator is not None:
            named["edge_generator"] = self.edge_generator
            named["color_generator"] = self.color_generator
        return named

    def eval(self) -> "EbraEnsemble":
        """Switch every network to inference mode."""
        for module in self.modules().values():
            module.eval()
        return self

    def to(self, device: torch.device) -> "EbraEnsemble":
        """Move every network to a device."""
        for module in self.modules().values():
            module.to(device)
        return self

    def hparams(self) -> Dict[str, Any]:
        """Constructor arguments, stored in checkpoints."""
        return {
            "resolution": self.resolution,
            "k": self.k,
            "d": self.d,
            "channels": self.channels,
            "base": self.base,
            "use_auxiliary": self.use_auxiliary,
        }

    def auxiliary_taps(self, x: torch.Tensor) -> List[List[torch.Tensor]]:
        """Tapped feature maps of I1 and I2 on the complete image."""
        if self.edge_generator is None or self.color_generator is None:
            return []
        _, edge_taps = self.edge_generator(x)
        _, color_taps = self.color_generator(x)
        return [edge_taps, color_taps]

    def schedule(self, height: int, width: int, start: Tuple[int, int] = (0, 0)) -> EraseSchedule:
        """Erase schedule for this ensemble's (k, d)."""
        return make_erase_schedule(height, width, self.k, self.d, start)


def build_ebra_ensemble(
    resolution: int,
    k: int,
    d: int,
    channels: int = 3,
    base: int = 32,
    use_auxiliary: bool = True,
) -> EbraEnsemble:
    """Untrained ensemble; checks the tiling and the fusion-tap geometry."""
    make_erase_schedule(resolution, resolution, k, d)
    if resolution % 4:
        raise ConfigurationError("Resolution must be divisible by 4 for the generators")
    edge_gen = color_gen = None
    aux_channels = None
    if use_auxiliary:
        edge_gen = AuxiliaryGenerator(channels, 1, base)
        color_gen = AuxiliaryGenerator(channels, channels, base)
        aux_channels = [a + b for a, b in zip(edge_gen.tap_channels, color_gen.tap_channels)]
    ensemble = EbraEnsemble(
        inpainter=InpaintingNet(channels, base, aux_channels),
        edge_generator=edge_gen,
        color_generator=color_gen,
        k=k,
        d=d,
        resolution=resolution,
        channels=channels,
        base=base,
    )
    if use_auxiliary:
        _check_tap_geometry(ensemble)
    return ensemble


def _check_tap_geometry(ensemble: EbraEnsemble) -> None:
    res = ensemble.resolution
    expected = [(res // 4, res // 4), (res // 2, res // 2), (res, res), (res, res)]
    with torch.no_grad():
        probe = torch.zeros((1, ensemble.channels, res, res))
        for taps in ensemble.auxiliary_taps(probe):
            sizes = [tuple(t.shape[-2:]) for t in taps]
            if sizes != expected:
                raise ConfigurationError(f"Fusion taps at {sizes} do not match {expected}")


def erase(
    c_prime: torch.Tensor, schedule: EraseSchedule, pass_index: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mask of one pass and the container with those pixels set to exactly zero."""
    check_image(c_prime, "container")
    if tuple(c_prime.shape[-2:]) != (schedule.height, schedule.width):
        raise ConfigurationError("schedule was built for a different image size")
    mask = mask_from_pass(schedule, pass_index, c_prime.shape[0]).to(c_prime.device, c_prime.dtype)
    return mask, c_prime * (1.0 - mask)


def repair_pass(
    ensemble: EbraEnsemble,
    c_prime: torch.Tensor,
    mask: torch.Tensor,
    c_prime_masked: torch.Tensor,
    aux: Sequence[Sequence[torch.Tensor]] | None = None,
) -> torch.Tensor:
    """Inpaint one erased pass and composite M*I3 + (1-M)*c'^M.

    The auxiliary generators see the complete container, the inpainter the masked one.
    """
    check_image(c_prime, "container")
    check_mask(mask, c_prime)
    if c_prime_masked.shape != c_prime.shape:
        raise ConfigurationError("masked container does not match the container")
    with torch.no_grad():
        if aux is None:
            aux = ensemble.auxiliary_taps(c_prime)
        repaired = ensemble.inpainter(c_prime_masked, mask, aux)
    return (mask * repaired + (1.0 - mask) * c_prime_masked).clamp(0.0, 1.0)


def ebra_purify(
    ensemble: EbraEnsemble,
    c_prime: torch.Tensor,
    batch_passes: bool = False,
    start: Tuple[int, int] = (0, 0),
) -> torch.Tensor:
    """Erase and repair every pass; each output pixel comes from the pass that masked it."""
    check_image(c_prime, "container")
    batch, _, height, width = c_prime.shape
    schedule = ensemble.schedule(height, width, start)
    with torch.no_grad():
        aux = ensemble.auxiliary_taps(c_prime)
        if batch_passes:
            passes = schedule.pass_count
            masks = pass_masks(schedule, batch).to(c_prime.device, c_prime.dtype)
            flat_masks = masks.reshape(passes * batch, 1, height, width)
            stacked = c_prime.repeat(passes, 1, 1, 1)
            stacked_aux = [[t.repeat(passes, 1, 1, 1) for t in taps] for taps in aux]
            repaired = ensemble.inpainter(stacked * (1.0 - flat_masks), flat_masks, stacked_aux)
            out = (masks * repaired.view(passes, batch, *c_prime.shape[1:])).sum(dim=0)
        else:
            out = torch.zeros_like(c_prime)
            for pass_index in range(schedule.pass_count):
                mask, masked = erase(c_prime, schedule, pass_index)
                out = out + mask * ensemble.inpainter(masked, mask, aux)
    return out.clamp(0.0, 1.0)


def _diverged(
    name: str, step: int, modules: Dict[str, nn.Module], checkpoint_dir: Path | None
) -> TrainingDivergedError:
    path = None
    if checkpoint_dir is not None:
        path = save_checkpoint(
            Path(checkpoint_dir) / f"diverged_{name}_step{step}.joblib",
            "diagnostic",
            {"stage": name},
            modules,
            log={"step": step},
        )
    return TrainingDivergedError(f"{name} loss became non-finite at step {step}", path)


def _optimizers(
    generator: nn.Module, discriminators: Sequence[nn.Module], cfg: EbraTrainConfig
) -> Tuple[torch.optim.Optimizer, torch.optim.Optimizer]:
    g_opt = torch.optim.Adam(generator.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    d_params = [p for disc in discriminators for p in disc.parameters()]
    d_opt = torch.optim.Adam(d_params, lr=cfg.disc_learning_rate, betas=cfg.betas)
    return g_opt, d_opt


def _train_auxiliary(
    name: str,
    generator: AuxiliaryGenerator,
    discriminator: PatchDiscriminator,
    data: DatasetHandle,
    targets: Callable[[torch.Tensor], torch.Tensor],
    condition: Callable[[torch.Tensor], torch.Tensor],
    steps: int,
    cfg: EbraTrainConfig,
    device: torch.device,
    checkpoint_dir: Path | None,
) -> List[Dict[str, float]]:
    generator.to(device).train()
    discriminator.to(device).train()
    g_opt, d_opt = _optimizers(generator, [discriminator], cfg)
    sampler = torch.Generator().manual_seed(cfg.seed)
    history: List[Dict[str, float]] = []
    for step in range(1, steps + 1):
        covers = data.sample(cfg.batch_size, sampler)
        labels = targets(covers).to(device)
        covers = covers.to(device)
        cond = condition(covers)
        output, _ = generator(covers)

        real_logits, _ = discriminator(torch.cat([cond, labels], dim=1))
        fake_logits, _ = discriminator(torch.cat([cond, output.detach()], dim=1))
        d_loss = discriminator_loss(real_logits, fake_logits)
        d_opt.zero_grad()
        d_loss.backward()
        d_opt.step()

        fake_logits, fake_features = discriminator(torch.cat([cond, output], dim=1))
        _, real_features = discriminator(torch.cat([cond, labels], dim=1))
        adv = generator_adversarial_loss(fake_logits)
        fm = feature_matching_loss(real_features, fake_features)
        g_loss = adv + cfg.lambda_fm * fm
        if not (math.isfinite(float(g_loss)) and math.isfinite(float(d_loss))):
            raise _diverged(name, step, {"generator": generator}, checkpoint_dir)
        g_opt.zero_grad()
        g_loss.backward()
        g_opt.step()

        if step % cfg.log_every == 0 or step == steps:
            history.append({"step": step, "d": float(d_loss), "adv": float(adv), "fm": float(fm)})
            logger.info("%s step %d: D %.4f adv %.4f FM %.4f", name, step, d_loss, adv, fm)
    generator.eval()
    return history


def _label_cache(cfg: EbraTrainConfig, cache_dir: Path | None) -> LabelCache:
    return LabelCache(
        cache_dir,
        (cfg.canny_low, cfg.canny_high),
        cfg.slic_segments or None,
        cfg.slic_compactness,
    )


def train_edge_generator(
    edge_generator: AuxiliaryGenerator,
    discriminator: PatchDiscriminator,
    data: DatasetHandle,
    cfg: EbraTrainConfig,
    device: torch.device | None = None,
    cache_dir: Path | None = None,
    checkpoint_dir: Path | None = None,
    train_log: Dict[str, Any] | None = None,
) -> AuxiliaryGenerator:
    """Adversarial + feature-matching training of I1 against Canny labels of covers."""
    labels = _label_cache(cfg, cache_dir)
    log = _train_auxiliary(
        "edge_generator",
        edge_generator,
        discriminator,
        data,
        lambda covers: labels.labels(covers).edges,
        to_luminance,
        cfg.edge_steps,
        cfg,
        device or select_device(),
        checkpoint_dir,
    )
    if train_log is not None:
        train_log["edge_generator"] = log
    return edge_generator


def train_color_generator(
    color_generator: AuxiliaryGenerator,
    discriminator: PatchDiscriminator,
    data: DatasetHandle,
    cfg: EbraTrainConfig,
    device: torch.device | None = None,
    cache_dir: Path | None = None,
    checkpoint_dir: Path | None = None,
    train_log: Dict[str, Any] | None = None,
) -> AuxiliaryGenerator:
    """Same loss structure as the edge generator, against superpixel colour labels."""
    labels = _label_cache(cfg, cache_dir)
    log = _train_auxiliary(
        "color_generator",
        color_generator,
        discriminator,
        data,
        lambda covers: labels.labels(covers).colors,
        lambda covers: covers,
        cfg.color_steps,
        cfg,
        device or select_device(),
        checkpoint_dir,
    )
    if train_log is not None:
        train_log["color_generator"] = log
    return color_generator


def local_disc_depth(k: int) -> int:
    """Downsampling depth of the local discriminator for k x k crops."""
    return max(1, min(3, int(math.log2(k)) - 1))


def _local_crop(
    images: Sequence[torch.Tensor],
    schedule: EraseSchedule,
    pass_index: int,
    generator: torch.Generator,
) -> List[torch.Tensor]:
    cells = schedule.cells(pass_index)
    cell = cells[int(torch.randint(len(cells), (1,), generator=generator))]
    top, bottom, left, right = schedule.tile_bounds(cell)
    size = (schedule.k, schedule.k)
    crops = []
    for image in images:
        crop = image[..., top:bottom, left:right]
        if tuple(crop.shape[-2:]) != size:
            crop = F.interpolate(crop, size=size, mode="bilinear", align_corners=False)
        crops.append(crop)
    return crops


def train_inpainting(
    ensemble: EbraEnsemble,
    local_disc: PatchDiscriminator,
    global_disc: PatchDiscriminator,
    data: DatasetHandle,
    cfg: EbraTrainConfig,
    device: torch.device | None = None,
    extractor: PerceptualExtractor | None = None,
    checkpoint_dir: Path | None = None,
) -> InpaintingNet:
    """Train I3 on covers with frozen I1/I2, masks from random passes of random-start schedules."""
    device = device or select_device()
    inpainter = ensemble.inpainter.to(device).train()
    for module in (ensemble.edge_generator, ensemble.color_generator):
        if module is not None:
            module.to(device).eval()
            for param in module.parameters():
                param.requires_grad_(False)
    if extractor is None:
        extractor = PerceptualExtractor(cfg.perceptual_layers, cfg.pretrained_perceptual)
    extractor = extractor.to(device)
    local_disc.to(device).train()
    global_disc.to(device).train()
    g_opt, d_opt = _optimizers(inpainter, [local_disc, global_disc], cfg)
    sampler = torch.Generator().manual_seed(cfg.seed)
    history: List[Dict[str, float]] = []
    height = width = ensemble.resolution

    for step in range(1, cfg.inpaint_steps + 1):
        covers = data.sample(cfg.batch_size, sampler).to(device)
        top, left = (int(v) for v in torch.randint(ensemble.d + 1, (2,), generator=sampler))
        schedule = make_erase_schedule(height, width, ensemble.k, ensemble.d, (top, left))
        pass_index = int(torch.randint(schedule.pass_count, (1,), generator=sampler))
        mask, masked = erase(covers, schedule, pass_index)
        with torch.no_grad():
            aux = ensemble.auxiliary_taps(covers)
        raw = inpainter(masked, mask, aux)
        composite = mask * raw + (1.0 - mask) * covers
        real_local, fake_local = _local_crop([covers, composite], schedule, pass_index, sampler)

        d_loss = discriminator_loss(
            global_disc(covers)[0], global_disc(composite.detach())[0]
        ) + discriminator_loss(local_disc(real_local)[0], local_disc(fake_local.detach())[0])
        d_opt.zero_grad()
        d_loss.backward()
        d_opt.step()

        adv = generator_adversarial_loss(global_disc(composite)[0]) + generator_adversarial_loss(
            local_disc(fake_local)[0]
        )
        rec = reconstruction_loss(raw, covers)
        per = perceptual_loss(extractor(covers), extractor(raw))
        g_loss = adv + cfg.lambda_rec * rec + cfg.lambda_per * per
        if not (math.isfinite(float(g_loss)) and math.isfinite(float(d_loss))):
            raise _diverged("inpainter", step, {"inpainter": inpainter}, checkpoint_dir)
        g_opt.zero_grad()
        g_loss.backward()
        g_opt.step()

        if step % cfg.log_every == 0 or step == cfg.inpaint_steps:
            history.append(
                {
                    "step": step,
                    "d": float(d_loss),
                    "adv": float(adv),
                    "rec": float(rec),
                    "per": float(per),
                }
            )
            logger.info(
                "inpainter step %d: D %.4f adv %.4f rec %.4f per %.4f", step, d_loss, adv, rec, per
            )
    inpainter.eval()
    ensemble.train_log["inpainter"] = history
    return inpainter


def train_ebra(
    data: DatasetHandle,
    cfg: EbraTrainConfig,
    device: torch.device | None = None,
    cache_dir: Path | None = None,
    checkpoint_dir: Path | None = None,
) -> EbraEnsemble:
    """Build and train a full ensemble (or the inpainting-only ablation) on covers."""
    device = device or select_device()
    torch.manual_seed(cfg.seed)
    ensemble = build_ebra_ensemble(
        data.resolution, cfg.k, cfg.d, data.channels, cfg.base, cfg.use_auxiliary
    )
    if ensemble.edge_generator is not None and ensemble.color_generator is not None:
        train_edge_generator(
            ensemble.edge_generator,
            PatchDiscriminator(2, cfg.disc_base),
            data,
            cfg,
            device,
            cache_dir,
            checkpoint_dir,
            ensemble.train_log,
        )
        train_color_generator(
            ensemble.color_generator,
            PatchDiscriminator(2 * data.channels, cfg.disc_base),
            data,
            cfg,
            device,
            cache_dir,
            checkpoint_dir,
            ensemble.train_log,
        )
    train_inpainting(
        ensemble,
        PatchDiscriminator(data.channels, cfg.disc_base, depth=local_disc_depth(cfg.k)),
        PatchDiscriminator(data.channels, cfg.disc_base),
        data,
        cfg,
        device,
        checkpoint_dir=checkpoint_dir,
    )
    ensemble.train_log["config"] = cfg.to_dict()
    return ensemble.eval()


def save_ebra_ensemble(ensemble: EbraEnsemble, path: Path) -> Path:
    """Write an ebra_ensemble checkpoint."""
    return save_checkpoint(
        path,
        "ebra_ensemble",
        ensemble.hparams(),
        ensemble.modules(),
        config=ensemble.train_log.get("config", {}),
        log=ensemble.train_log,
    )


def load_ebra_ensemble(path: Path, device: torch.device | None = None) -> EbraEnsemble:
    """Rebuild a trained ensemble from its checkpoint."""
    payload = load_checkpoint(path, "ebra_ensemble")
    ensemble = build_ebra_ensemble(**payload["hparams"])
    for name, module in ensemble.modules().items():
        restore_module(module, payload["state"][name])
    ensemble.train_log = payload["log"]
    return ensemble.to(device or torch.device("cpu")).eval()
