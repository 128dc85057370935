"""Experiment orchestration: training stages, attack grids, k sweeps and timing runs.

Layout of an output directory::

    manifest.json        append-only stage log
    config.json          resolved experiment configuration
    checkpoints/         hiding pairs, noise autoencoder, EBRA ensembles
    tables/              rows.csv, table_psnr.csv, table_ssim.csv, table_vif.csv, ...
    figures/             image grids and curves (PNG)

EBRA stages are built from the cover dataset alone and never receive a hiding checkpoint.
"""

import csv
import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np
import torch
from joblib import Parallel, delayed
from matplotlib.figure import Figure

from stegpurify._util import CONFIG, ConfigurationError, StageError, StegPurifyError, select_device
from stegpurify.attacks import DistortionSpec, LatticeSpec, apply_distortion, lattice_attack
from stegpurify.ebra import (
    EbraEnsemble,
    EbraTrainConfig,
    ebra_purify,
    load_ebra_ensemble,
    save_ebra_ensemble,
    train_ebra,
)
from stegpurify.experiment_config import (
    AttackEntry,
    ExperimentConfig,
    SchemeSpec,
    stable_hash,
    write_snapshot,
)
from stegpurify.hiding import (
    HidingPair,
    HidingTrainConfig,
    build_hiding_pair,
    hide,
    load_hiding_pair,
    make_secret_batch,
    reveal,
    save_hiding_pair,
    train_hiding,
    train_noise_autoencoder,
)
from stegpurify.image_core import (
    DatasetHandle,
    load_dataset,
    load_image,
    output_pairs,
    save_image,
)
from stegpurify.metrics import MetricReportRow, read_rows_csv, report, write_rows_csv
from stegpurify.nes_attack import NesSpec, nes_attack
from stegpurify.noise_layers import load_noise_autoencoder
from stegpurify.run_manifest import RunManifest, StageEntry, StageTimer

logger = logging.getLogger(__name__)

AttackFn = Callable[[torch.Tensor], torch.Tensor]
Oracle = Callable[[torch.Tensor], torch.Tensor]

EBRA_KINDS = ("ebra", "ebra_dagger")
CHUNK = 32
TABLES = {
    "psnr": ("psnr_c", "psnr_s", "{:.2f}"),
    "ssim": ("ssim_c", "ssim_s", "{:.3f}"),
    "vif": ("vif_c", "vif_s", "{:.3f}"),
}


@dataclass(frozen=True)
class RunLayout:
    """File locations inside one experiment output directory."""

    root: Path

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def tables(self) -> Path:
        return self.root / "tables"

    @property
    def figures(self) -> Path:
        return self.root / "figures"

    @property
    def rows_csv(self) -> Path:
        return self.tables / "rows.csv"

    @property
    def autoencoder(self) -> Path:
        return self.checkpoints / "noise_autoencoder.joblib"

    def hiding(self, scheme: str) -> Path:
        """Checkpoint of a trained scheme."""
        return self.checkpoints / f"hiding_{scheme}.joblib"

    def ebra(self, k: int, d: int, dagger: bool = False) -> Path:
        """Checkpoint of an ensemble (or the inpainting-only ablation)."""
        prefix = "ebra_dagger" if dagger else "ebra"
        return self.checkpoints / f"{prefix}_k{k}_d{d}.joblib"

    def partial(self, attack: str, scheme: str) -> Path:
        """Where an interrupted NES run leaves its partial result."""
        return self.root / "partial" / f"{scheme}_{attack}.joblib"


def sweep_d(k: int, resolution: int, d: int) -> int:
    """Tile gap used for tile side k: d, reduced until the schedule fits the image."""
    if not 1 <= k <= resolution:
        raise ConfigurationError(f"k={k} does not fit a {resolution}px image")
    grid = -(-resolution // k)
    return min(d, grid - 1)


def cell_seed(seed: int, scheme: str, attack: str) -> int:
    """Seed of one grid cell; independent of execution order."""
    return int(hashlib.md5(f"{seed}|{scheme}|{attack}".encode()).hexdigest()[:8], 16)


def chunk_seed(seed: int, index: int) -> int:
    """Seed of the ``index``-th chunk (or file) attacked within one cell."""
    return int(hashlib.md5(f"{seed}|chunk{index}".encode()).hexdigest()[:8], 16)


def _chunked(fn: AttackFn, x: torch.Tensor, size: int = CHUNK) -> torch.Tensor:
    return torch.cat([fn(x[i : i + size]) for i in range(0, x.shape[0], size)])


def _sync(device: torch.device) -> None:
    if device.type == "cuda":
        torch.cuda.synchronize(device)


# ---------------------------------------------------------------- attack registry


@dataclass
class AttackContext:
    """What an attack builder may use. ``oracle`` is only handed to black-box attacks."""

    cfg: ExperimentConfig
    layout: RunLayout
    device: torch.device
    scheme: str = ""
    seed: int = 0
    oracle: Oracle | None = None
    ensembles: Dict[Path, EbraEnsemble] = field(default_factory=dict)
    lock: threading.Lock = field(default_factory=threading.Lock)


AttackBuilder = Callable[[AttackEntry, AttackContext], AttackFn]
ATTACKS: Dict[str, AttackBuilder] = {}


def register_attack(kind: str) -> Callable[[AttackBuilder], AttackBuilder]:
    """Decorator adding a builder to the attack registry."""

    def wrap(builder: AttackBuilder) -> AttackBuilder:
        ATTACKS[kind] = builder
        return builder

    return wrap


def _seeded(params: Dict, seed: int) -> Dict:
    params = dict(params)
    params.setdefault("seed", seed)
    return params


@register_attack("identity")
def _identity(_entry: AttackEntry, _ctx: AttackContext) -> AttackFn:
    return lambda x: x.clone()


@register_attack("distortion")
def _distortion(entry: AttackEntry, ctx: AttackContext) -> AttackFn:
    return partial(apply_distortion, DistortionSpec.from_dict(_seeded(entry.params, ctx.seed)))


@register_attack("lattice")
def _lattice(entry: AttackEntry, ctx: AttackContext) -> AttackFn:
    return partial(lattice_attack, LatticeSpec.from_dict(_seeded(entry.params, ctx.seed)))


@register_attack("nes")
def _nes(entry: AttackEntry, ctx: AttackContext) -> AttackFn:
    if ctx.oracle is None:
        raise StageError(f"Attack {entry.name} needs a scheme to query")
    spec = NesSpec.from_dict(_seeded(entry.params, ctx.seed))
    partial_path = ctx.layout.partial(entry.name, ctx.scheme)
    partial_path.parent.mkdir(parents=True, exist_ok=True)
    oracle = ctx.oracle
    return lambda x: nes_attack(spec, x, oracle, partial_path)


def ebra_params(entry: AttackEntry, cfg: ExperimentConfig) -> Tuple[int, int, bool]:
    """(k, d, batch_passes) of an ebra or ebra_dagger attack entry."""
    params = dict(entry.params)
    k = params.pop("k", cfg.ebra.train.k)
    batch_passes = params.pop("batch_passes", True)
    if params:
        raise ConfigurationError(f"Unknown {entry.kind} parameters: {', '.join(sorted(params))}")
    return k, sweep_d(k, cfg.resolution, cfg.ebra.train.d), bool(batch_passes)


def _ensemble(ctx: AttackContext, path: Path) -> EbraEnsemble:
    with ctx.lock:
        if path not in ctx.ensembles:
            if not path.exists():
                raise StageError(f"Ensemble {path.name} has not been trained")
            ctx.ensembles[path] = load_ebra_ensemble(path, ctx.device)
        return ctx.ensembles[path]


def _ebra_builder(dagger: bool) -> AttackBuilder:
    def build(entry: AttackEntry, ctx: AttackContext) -> AttackFn:
        k, d, batch_passes = ebra_params(entry, ctx.cfg)
        ensemble = _ensemble(ctx, ctx.layout.ebra(k, d, dagger))
        return lambda x: ebra_purify(ensemble, x, batch_passes=batch_passes)

    return build


register_attack("ebra")(_ebra_builder(False))
register_attack("ebra_dagger")(_ebra_builder(True))


def build_attack(entry: AttackEntry, ctx: AttackContext) -> AttackFn:
    """Callable mapping a container batch to its attacked version."""
    builder = ATTACKS.get(entry.kind)
    if builder is None:
        raise ConfigurationError(f"No attack registered for kind {entry.kind}")
    return builder(entry, ctx)


# ---------------------------------------------------------------- training stages


@dataclass
class Stage:
    """One node of the training DAG."""

    name: str
    family: str
    artifact: Path
    config_hash: str
    run: Callable[[DatasetHandle, torch.device], None]
    depends: Tuple[str, ...] = ()


@dataclass
class StageSummary:
    """Outcome of stage_train_all."""

    ran: List[str] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    blocked: List[str] = field(default_factory=list)
    failed: Dict[str, str] = field(default_factory=dict)
    artifacts: Dict[str, Path] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.failed and not self.blocked


def _uses_autoencoder(scheme: SchemeSpec) -> bool:
    noise = scheme.train.noise
    if noise.ae_checkpoint:
        return False
    return noise.kind == "AE" or (noise.kind == "combined" and noise.weights.get("AE", 0) > 0)


def required_ensembles(cfg: ExperimentConfig) -> List[Tuple[int, int, bool]]:
    """(k, d, dagger) of every ensemble the attacks and the k sweep need."""
    wanted: List[Tuple[int, int, bool]] = []
    for entry in cfg.attacks:
        if entry.kind in EBRA_KINDS:
            k, d, _ = ebra_params(entry, cfg)
            wanted.append((k, d, entry.kind == "ebra_dagger"))
    for k in cfg.ebra.k_values:
        wanted.append((k, sweep_d(k, cfg.resolution, cfg.ebra.train.d), False))
    return list(dict.fromkeys(wanted))


def plan_stages(cfg: ExperimentConfig, layout: RunLayout) -> List[Stage]:
    """Stages in dependency order."""
    base = {
        "resolution": cfg.resolution,
        "dataset": cfg.dataset.to_dict(),
        "seed": cfg.seed,
    }
    stages: List[Stage] = []
    ae_hash = stable_hash({**base, "autoencoder": cfg.autoencoder.to_dict()})

    if any(_uses_autoencoder(s) for s in cfg.schemes):

        def run_ae(data: DatasetHandle, device: torch.device) -> None:
            train_noise_autoencoder(data, cfg.autoencoder, layout.autoencoder, device)
            load_noise_autoencoder.cache_clear()

        stages.append(Stage("autoencoder", "ae", layout.autoencoder, ae_hash, run_ae))

    for scheme in cfg.schemes:
        train_cfg = scheme.train
        depends: Tuple[str, ...] = ()
        if _uses_autoencoder(scheme):
            noise = replace(train_cfg.noise, ae_checkpoint=str(layout.autoencoder))
            train_cfg = replace(train_cfg, noise=noise)
            depends = ("autoencoder",)
        stage_hash = stable_hash(
            {
                **base,
                "scheme": replace(scheme, train=train_cfg).to_dict(),
                "autoencoder": ae_hash if depends else None,
            }
        )
        stages.append(
            Stage(
                f"hiding:{scheme.name}",
                "hiding",
                layout.hiding(scheme.name),
                stage_hash,
                partial(_run_hiding, scheme, train_cfg, layout, cfg.resolution),
                depends,
            )
        )

    for k, d, dagger in required_ensembles(cfg):
        train_cfg = replace(cfg.ebra.train, k=k, d=d, use_auxiliary=not dagger)
        prefix = "ebra_dagger" if dagger else "ebra"
        stages.append(
            Stage(
                f"{prefix}:k{k}_d{d}",
                "ebra",
                layout.ebra(k, d, dagger),
                stable_hash({**base, "ebra": train_cfg.to_dict()}),
                partial(_run_ebra, train_cfg, layout.ebra(k, d, dagger), layout),
            )
        )
    return stages


def _run_hiding(
    scheme: SchemeSpec,
    train_cfg: HidingTrainConfig,
    layout: RunLayout,
    resolution: int,
    data: DatasetHandle,
    device: torch.device,
) -> None:
    pair = build_hiding_pair(
        scheme.meta_arch,
        resolution,
        scheme.secret_channels,
        scheme.width_scale,
        cover_channels=data.channels,
    )
    train_hiding(pair, data, train_cfg, device, checkpoint_dir=layout.checkpoints)
    save_hiding_pair(pair, layout.hiding(scheme.name))


def _run_ebra(
    train_cfg: EbraTrainConfig,
    path: Path,
    layout: RunLayout,
    data: DatasetHandle,
    device: torch.device,
) -> None:
    ensemble = train_ebra(data, train_cfg, device, CONFIG.cache_dir, layout.checkpoints)
    save_ebra_ensemble(ensemble, path)


def stage_train_all(
    cfg: ExperimentConfig,
    device: torch.device | None = None,
    families: Sequence[str] | None = None,
) -> StageSummary:
    """Run every stale stage; a failure blocks only the stages depending on it.

    ``families`` restricts the run to "ae", "hiding" and/or "ebra" stages; stages outside
    the selection count as done when their checkpoint exists.
    """
    device = device or select_device()
    layout = RunLayout(cfg.output_root())
    manifest = RunManifest(layout.root)
    summary = StageSummary()
    done: set[str] = set()
    data: DatasetHandle | None = None

    for stage in plan_stages(cfg, layout):
        if families is not None and stage.family not in families:
            if stage.artifact.exists():
                done.add(stage.name)
            continue
        missing = [dep for dep in stage.depends if dep not in done]
        if missing:
            logger.warning("Stage %s blocked by %s", stage.name, ", ".join(missing))
            summary.blocked.append(stage.name)
            manifest.append(
                StageEntry(stage.name, stage.config_hash, "blocked", message=", ".join(missing))
            )
            continue
        if manifest.is_current(stage.name, stage.config_hash):
            logger.warning("Skipping stage %s: checkpoint is up to date", stage.name)
            summary.skipped.append(stage.name)
            summary.artifacts[stage.name] = stage.artifact
            done.add(stage.name)
            manifest.append(
                StageEntry(
                    stage.name,
                    stage.config_hash,
                    "skipped",
                    artifacts=[str(stage.artifact)],
                    device=str(device),
                )
            )
            continue
        if data is None:
            data = load_dataset(
                cfg.dataset.resolved_root(),
                cfg.resolution,
                cfg.dataset.train_split,
                cfg.seed,
                cfg.dataset.channels,
            )
            layout.checkpoints.mkdir(parents=True, exist_ok=True)
            write_snapshot(cfg, layout.root / "config.json")
        logger.info("Running stage %s", stage.name)
        timer = StageTimer()
        try:
            with timer:
                stage.run(data, device)
        except Exception as exc:  # pylint: disable=broad-exception-caught
            logger.error("Stage %s failed: %s", stage.name, exc)
            summary.failed[stage.name] = str(exc)
            manifest.append(
                StageEntry(
                    stage.name,
                    stage.config_hash,
                    "failed",
                    seconds=timer.seconds,
                    device=str(device),
                    message=str(exc),
                )
            )
            continue
        done.add(stage.name)
        summary.ran.append(stage.name)
        summary.artifacts[stage.name] = stage.artifact
        manifest.append(
            StageEntry(
                stage.name,
                stage.config_hash,
                "ok",
                seconds=timer.seconds,
                artifacts=[str(stage.artifact)],
                device=str(device),
            )
        )
    return summary


# ---------------------------------------------------------------- evaluation grid


def load_eval_covers(cfg: ExperimentConfig) -> torch.Tensor:
    """Held-out covers used by every evaluation."""
    data = load_dataset(
        cfg.dataset.resolved_root(),
        cfg.resolution,
        cfg.dataset.eval_split,
        cfg.seed,
        cfg.dataset.channels,
    )
    if len(data) < 2:
        raise ConfigurationError(
            f"Evaluation split {cfg.dataset.eval_split!r} needs at least two images"
        )
    return data.images[: cfg.dataset.eval_images]


@dataclass
class SchemeEval:
    """A trained pair with its containers and the secrets they reveal before any attack."""

    name: str
    pair: HidingPair
    containers: torch.Tensor
    revealed: torch.Tensor
    covers: torch.Tensor

    def oracle(self, x: torch.Tensor) -> torch.Tensor:
        """Black-box query of the revealing network."""
        return _chunked(partial(reveal, self.pair), x)


def prepare_scheme(
    cfg: ExperimentConfig,
    layout: RunLayout,
    scheme: SchemeSpec,
    covers: torch.Tensor,
    device: torch.device,
) -> SchemeEval:
    """Load a trained scheme and hide one derangement of the covers in the others."""
    path = layout.hiding(scheme.name)
    if not path.exists():
        raise StageError(f"Scheme {scheme.name} has not been trained ({path})")
    pair = load_hiding_pair(path, device)
    covers = covers.to(device)
    secrets = make_secret_batch(covers, scheme.secret_channels, cfg.metrics.binarize_secrets)
    containers = torch.cat(
        [
            hide(pair, covers[i : i + CHUNK], secrets[i : i + CHUNK])
            for i in range(0, covers.shape[0], CHUNK)
        ]
    )
    # containers are exchanged as 8-bit images
    containers = torch.round(containers * 255.0) / 255.0
    revealed = _chunked(partial(reveal, pair), containers)
    return SchemeEval(scheme.name, pair, containers, revealed, covers)


def attack_chunks(
    entry: AttackEntry, ctx: AttackContext, x: torch.Tensor, size: int = CHUNK
) -> torch.Tensor:
    """Attack ``x`` in chunks of ``size``, each seeded from ``ctx.seed`` and its index."""
    parts = []
    for index, start in enumerate(range(0, x.shape[0], size)):
        attack = build_attack(entry, replace(ctx, seed=chunk_seed(ctx.seed, index)))
        parts.append(attack(x[start : start + size]))
    return torch.cat(parts)


@dataclass
class CellResult:
    """One (scheme, attack) cell; ``error`` is set instead of ``row`` on failure."""

    scheme: str
    attack: str
    row: MetricReportRow | None = None
    purified: torch.Tensor | None = None
    revealed: torch.Tensor | None = None
    error: str = ""


def run_cell(
    ctx: AttackContext, scheme: SchemeEval, entry: AttackEntry, keep: int = 0
) -> CellResult:
    """Attack one scheme's containers and report C/S metrics; never raises."""
    try:
        cell_ctx = replace(
            ctx,
            scheme=scheme.name,
            seed=cell_seed(ctx.cfg.seed, scheme.name, entry.name),
            oracle=scheme.oracle if entry.kind == "nes" else None,
        )
        purified = attack_chunks(entry, cell_ctx, scheme.containers)
        revealed = scheme.oracle(purified)
        row = report(
            scheme.name,
            entry.name,
            scheme.containers,
            purified,
            scheme.revealed,
            revealed,
            ctx.cfg.metrics.per_thresholds,
            ctx.cfg.metrics.quality_budget,
            config=json.dumps(entry.params, sort_keys=True, separators=(",", ":")),
        )
    except Exception as exc:  # pylint: disable=broad-exception-caught
        logger.warning("Cell %s x %s failed: %s", scheme.name, entry.name, exc)
        return CellResult(scheme.name, entry.name, error=f"{type(exc).__name__}: {exc}")
    logger.info(
        "Cell %s x %s: PSNR-C %.2f VIF-S %.3f", scheme.name, entry.name, row.psnr_c, row.vif_s
    )
    return CellResult(scheme.name, entry.name, row, purified[:keep].cpu(), revealed[:keep].cpu())


@dataclass
class GridResult:
    """Rows, failures and written files of run_grid."""

    rows: List[MetricReportRow]
    failures: List[CellResult]
    paths: Dict[str, Path]

    @property
    def ok(self) -> bool:
        return not self.failures


def write_tables(
    rows: Sequence[MetricReportRow],
    schemes: Sequence[str],
    attacks: Sequence[str],
    directory: Path,
) -> Dict[str, Path]:
    """Attack-by-scheme tables with "C|S" cells; failed cells read "failed"."""
    directory.mkdir(parents=True, exist_ok=True)
    by_cell = {(row.scheme, row.attack): row for row in rows}
    written = {}
    for name, (c_field, s_field, fmt) in TABLES.items():
        path = directory / f"table_{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["attack", *schemes])
            for attack in attacks:
                cells = []
                for scheme in schemes:
                    row = by_cell.get((scheme, attack))
                    if row is None:
                        cells.append("failed")
                    else:
                        c_value = fmt.format(getattr(row, c_field))
                        cells.append(f"{c_value}|{fmt.format(getattr(row, s_field))}")
                writer.writerow([attack, *cells])
        written[f"table_{name}"] = path
    return written


def _as_image(x: torch.Tensor) -> Tuple[np.ndarray, str | None]:
    array = x.detach().clamp(0.0, 1.0).cpu().numpy()
    if array.shape[0] == 1:
        return array[0], "gray"
    return np.transpose(array, (1, 2, 0)), None


def plot_image_grid(
    scheme: SchemeEval, cells: Sequence[CellResult], count: int, path: Path
) -> Path | None:
    """Rows of images; columns cover, container, revealed, then each attack's pair."""
    cells = [cell for cell in cells if cell.purified is not None and cell.revealed is not None]
    count = min(count, scheme.containers.shape[0])
    if count == 0:
        return None
    columns: List[Tuple[str, torch.Tensor]] = [
        ("cover", scheme.covers),
        ("container", scheme.containers),
        ("revealed", scheme.revealed),
    ]
    for cell in cells:
        columns.append((cell.attack, cell.purified))  # type: ignore[arg-type]
        columns.append((f"{cell.attack} R", cell.revealed))  # type: ignore[arg-type]
    fig = Figure(figsize=(1.6 * len(columns), 1.6 * count))
    axes = fig.subplots(count, len(columns), squeeze=False)
    for i in range(count):
        for j, (title, images) in enumerate(columns):
            image, cmap = _as_image(images[i])
            axes[i][j].imshow(image, cmap=cmap, vmin=0.0, vmax=1.0)
            axes[i][j].set_axis_off()
            if i == 0:
                axes[i][j].set_title(title, fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    return path


def plot_metric_bars(rows: Sequence[MetricReportRow], metric: str, path: Path) -> Path:
    """Grouped bar chart of one metric, attacks on the x axis and one bar per scheme."""
    schemes = list(dict.fromkeys(row.scheme for row in rows))
    attacks = list(dict.fromkeys(row.attack for row in rows))
    values = {(row.scheme, row.attack): getattr(row, metric) for row in rows}
    width = 0.8 / max(len(schemes), 1)
    fig = Figure(figsize=(max(4.0, 0.9 * len(attacks)), 3.0))
    ax = fig.subplots()
    for i, scheme in enumerate(schemes):
        xs = [j + i * width for j in range(len(attacks))]
        ax.bar(xs, [values.get((scheme, a), np.nan) for a in attacks], width, label=scheme)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(attacks))])
    ax.set_xticklabels(attacks, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    return path


def run_grid(cfg: ExperimentConfig, device: torch.device | None = None) -> GridResult:
    """Every attack against every scheme; failed cells are recorded and skipped."""
    if not cfg.schemes or not cfg.attacks:
        raise ConfigurationError("The grid needs at least one scheme and one attack")
    device = device or select_device()
    layout = RunLayout(cfg.output_root())
    manifest = RunManifest(layout.root)
    keep = cfg.metrics.figure_images
    timer = StageTimer()

    with timer:
        covers = load_eval_covers(cfg)
        ctx = AttackContext(cfg, layout, device)
        prepared: List[SchemeEval] = []
        failures: List[CellResult] = []
        for scheme in cfg.schemes:
            try:
                prepared.append(prepare_scheme(cfg, layout, scheme, covers, device))
            except StegPurifyError as exc:
                logger.warning("Scheme %s unavailable: %s", scheme.name, exc)
                failures.extend(
                    CellResult(scheme.name, a.name, error=str(exc)) for a in cfg.attacks
                )
        results: List[CellResult] = Parallel(n_jobs=cfg.workers, backend="threading")(
            delayed(run_cell)(ctx, scheme, entry, keep)
            for scheme in prepared
            for entry in cfg.attacks
        )

    failures.extend(r for r in results if r.row is None)
    rows = [r.row for r in results if r.row is not None]
    scheme_names = [s.name for s in cfg.schemes]
    attack_names = [a.name for a in cfg.attacks]
    paths = {"rows": write_rows_csv(rows, layout.rows_csv)}
    paths.update(write_tables(rows, scheme_names, attack_names, layout.tables))
    if failures:
        paths["failures"] = _write_failures(failures, layout.tables / "failures.csv")
    for scheme in prepared:
        cells = [r for r in results if r.scheme == scheme.name]
        figure = plot_image_grid(scheme, cells, keep, layout.figures / f"grid_{scheme.name}.png")
        if figure is not None:
            paths[f"grid_{scheme.name}"] = figure
    if rows:
        paths["vif_s"] = plot_metric_bars(rows, "vif_s", layout.figures / "vif_s.png")
    paths["config"] = write_snapshot(cfg, layout.root / "config.json")
    manifest.append(
        StageEntry(
            "grid",
            cfg.config_hash(),
            "failed" if failures else "ok",
            seconds=timer.seconds,
            artifacts=[str(p) for p in paths.values()],
            device=str(device),
            message=f"{len(failures)} failed cell(s)" if failures else "",
        )
    )
    return GridResult(rows, failures, paths)


def _write_failures(failures: Iterable[CellResult], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["scheme", "attack", "error"])
        for cell in failures:
            writer.writerow([cell.scheme, cell.attack, cell.error])
    return path


def render_report(cfg: ExperimentConfig) -> Dict[str, Path]:
    """Rebuild tables and the VIF-S chart from a stored rows.csv."""
    layout = RunLayout(cfg.output_root())
    if not layout.rows_csv.exists():
        raise StageError(f"No stored rows at {layout.rows_csv}; run the grid first")
    rows = read_rows_csv(layout.rows_csv)
    schemes = [s.name for s in cfg.schemes] or list(dict.fromkeys(r.scheme for r in rows))
    attacks = [a.name for a in cfg.attacks] or list(dict.fromkeys(r.attack for r in rows))
    paths = write_tables(rows, schemes, attacks, layout.tables)
    if rows:
        paths["vif_s"] = plot_metric_bars(rows, "vif_s", layout.figures / "vif_s.png")
    return paths


# ---------------------------------------------------------------- k sweep


@dataclass(frozen=True)
class SweepPoint:
    """VIF of containers and revealed secrets after EBRA with tile side k."""

    k: int
    d: int
    vif_c: float
    vif_s: float


def run_k_sweep(
    cfg: ExperimentConfig,
    k_values: Sequence[int] | None = None,
    device: torch.device | None = None,
    scheme_name: str | None = None,
) -> List[SweepPoint]:
    """Evaluate one ensemble per k against one scheme and write k_sweep.csv and a curve."""
    k_values = list(k_values or cfg.ebra.k_values or (cfg.ebra.train.k,))
    if not cfg.schemes:
        raise ConfigurationError("The k sweep needs a scheme to attack")
    scheme = cfg.scheme(scheme_name) if scheme_name else cfg.schemes[0]
    device = device or select_device()
    layout = RunLayout(cfg.output_root())
    paths = {k: layout.ebra(k, sweep_d(k, cfg.resolution, cfg.ebra.train.d)) for k in k_values}
    missing = [k for k, path in paths.items() if not path.exists()]
    if missing:
        raise StageError(f"No trained ensemble for k={', '.join(map(str, missing))}")

    timer = StageTimer()
    points = []
    with timer:
        prepared = prepare_scheme(cfg, layout, scheme, load_eval_covers(cfg), device)
        for k, path in paths.items():
            ensemble = load_ebra_ensemble(path, device)
            purify = partial(ebra_purify, ensemble, batch_passes=True)
            purified = _chunked(purify, prepared.containers)
            row = report(
                scheme.name,
                f"ebra_k{k}",
                prepared.containers,
                purified,
                prepared.revealed,
                prepared.oracle(purified),
            )
            points.append(SweepPoint(k, ensemble.d, row.vif_c, row.vif_s))
            logger.info("k=%d: VIF-C %.3f VIF-S %.3f", k, row.vif_c, row.vif_s)

    csv_path = layout.tables / "k_sweep.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["k", "VIF_C", "VIF_S"])
        for point in points:
            writer.writerow([point.k, f"{point.vif_c:.6f}", f"{point.vif_s:.6f}"])

    fig = Figure(figsize=(4.0, 3.0))
    ax = fig.subplots()
    ks = [p.k for p in points]
    ax.plot(ks, [p.vif_c for p in points], marker="o", label="VIF-C")
    ax.plot(ks, [p.vif_s for p in points], marker="s", label="VIF-S")
    ax.set_xlabel("k")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    fig.tight_layout()
    figure = layout.figures / "k_sweep.png"
    figure.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(figure, dpi=100)

    RunManifest(layout.root).append(
        StageEntry(
            "sweep-k",
            stable_hash({"config": cfg.config_hash(), "k": k_values, "scheme": scheme.name}),
            seconds=timer.seconds,
            artifacts=[str(csv_path), str(figure)],
            device=str(device),
        )
    )
    return points


# ---------------------------------------------------------------- timing


@dataclass(frozen=True)
class TimingResult:
    """Per-image wall clock of one attack."""

    attack: str
    mean_ms: float
    std_ms: float
    images: int
    flagged: bool


def _timing_entries(cfg: ExperimentConfig) -> List[AttackEntry]:
    entries = []
    for entry in cfg.attacks:
        if entry.kind in EBRA_KINDS:
            for mode, batched in (("sequential", False), ("batched", True)):
                params = {**entry.params, "batch_passes": batched}
                entries.append(replace(entry, name=f"{entry.name}[{mode}]", params=params))
        else:
            entries.append(entry)
    return entries


def benchmark_timing(
    cfg: ExperimentConfig, device: torch.device | None = None, images: int | None = None
) -> Dict[str, TimingResult]:
    """Mean milliseconds per image for every attack, EBRA in both pass modes."""
    device = device or select_device()
    count = images or cfg.bench.images
    layout = RunLayout(cfg.output_root())
    covers = load_eval_covers(cfg)
    covers = covers[torch.arange(count) % covers.shape[0]].to(device)
    oracle = None
    containers = covers
    if cfg.schemes and layout.hiding(cfg.schemes[0].name).exists():
        prepared = prepare_scheme(cfg, layout, cfg.schemes[0], covers, device)
        containers, oracle = prepared.containers, prepared.oracle

    ctx = AttackContext(cfg, layout, device, scheme=cfg.schemes[0].name if cfg.schemes else "")
    results: Dict[str, TimingResult] = {}
    with torch.no_grad():
        for entry in _timing_entries(cfg):
            try:
                attack = build_attack(
                    entry,
                    replace(ctx, seed=cell_seed(cfg.seed, ctx.scheme, entry.name), oracle=oracle),
                )
            except StegPurifyError as exc:
                logger.warning("Not timing %s: %s", entry.name, exc)
                continue
            for i in range(cfg.bench.warmup):
                attack(containers[i % count : i % count + 1])
            _sync(device)
            times = []
            for i in range(count):
                timer = StageTimer()
                with timer:
                    attack(containers[i : i + 1])
                    _sync(device)
                times.append(timer.seconds * 1000.0)
            mean, std = float(np.mean(times)), float(np.std(times))
            flagged = std > cfg.bench.variance_flag * mean
            if flagged:
                logger.warning("%s timing varies: %.3f +- %.3f ms", entry.name, mean, std)
            results[entry.name] = TimingResult(entry.name, mean, std, count, flagged)

    path = layout.tables / "timing.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["attack", "mean_ms", "std_ms", "images", "flagged", "device"])
        for result in results.values():
            writer.writerow(
                [
                    result.attack,
                    f"{result.mean_ms:.4f}",
                    f"{result.std_ms:.4f}",
                    result.images,
                    str(result.flagged).lower(),
                    str(device),
                ]
            )
    RunManifest(layout.root).append(
        StageEntry("bench", cfg.config_hash(), artifacts=[str(path)], device=str(device))
    )
    return results


# ---------------------------------------------------------------- single-shot verbs


def attack_files(
    cfg: ExperimentConfig,
    attack_name: str,
    input_path: Path,
    output_path: Path,
    scheme_name: str | None = None,
    device: torch.device | None = None,
) -> List[Path]:
    """Apply one configured attack to image files and write the results as PNGs."""
    device = device or select_device()
    entry = cfg.attack(attack_name)
    layout = RunLayout(cfg.output_root())
    oracle = None
    if scheme_name is not None:
        path = layout.hiding(scheme_name)
        if not path.exists():
            raise StageError(f"Scheme {scheme_name} has not been trained ({path})")
        oracle = partial(reveal, load_hiding_pair(path, device))
    ctx = AttackContext(
        cfg,
        layout,
        device,
        scheme=scheme_name or "",
        seed=cell_seed(cfg.seed, scheme_name or "", attack_name),
        oracle=oracle,
    )
    build_attack(entry, ctx)  # fail before touching any file
    written = []
    for index, (src, dst) in enumerate(output_pairs(input_path, output_path)):
        attack = build_attack(entry, replace(ctx, seed=chunk_seed(ctx.seed, index)))
        image = load_image(src, channels=cfg.dataset.channels)[None].to(device)
        written.append(save_image(attack(image).cpu(), dst))
        logger.info("%s: %s -> %s", attack_name, src, dst)
    return written


def evaluate_directories(
    cfg: ExperimentConfig,
    scheme_name: str,
    before: Path,
    after: Path,
    attack_name: str = "external",
    device: torch.device | None = None,
) -> MetricReportRow:
    """Report metrics for containers attacked outside the harness (matched by file stem)."""
    device = device or select_device()
    layout = RunLayout(cfg.output_root())
    path = layout.hiding(scheme_name)
    if not path.exists():
        raise StageError(f"Scheme {scheme_name} has not been trained ({path})")
    pair = load_hiding_pair(path, device)
    originals = {src.stem: src for src, _ in output_pairs(before, before)}
    attacked = {src.stem: src for src, _ in output_pairs(after, after)}
    stems = sorted(set(originals) & set(attacked))
    if not stems:
        raise ConfigurationError(f"No matching image names in {before} and {after}")
    channels = pair.cover_channels

    def stack(paths: Dict[str, Path]) -> torch.Tensor:
        return torch.stack([load_image(paths[s], channels=channels) for s in stems]).to(device)

    containers, purified = stack(originals), stack(attacked)
    row = report(
        scheme_name,
        attack_name,
        containers,
        purified,
        _chunked(partial(reveal, pair), containers),
        _chunked(partial(reveal, pair), purified),
        cfg.metrics.per_thresholds,
        cfg.metrics.quality_budget,
    )
    write_rows_csv([row], layout.tables / f"evaluate_{scheme_name}_{attack_name}.csv")
    return row
